"""On-disk formats: `.dbk` distribution sequences, 16-bit PCM WAV, manifests.

`.dbk` sequence file layout::

    b"DBK1"                                  magic
    id=<utterance_id> T=<steps> V=<vocab>    UTF-8 header line, '\\n'-terminated
    T*V little-endian float32                row-major probability matrix

Probabilities (not log-probabilities) are stored. On load, entries are
floored at 0 and each row whose sum deviates from 1 by more than 1e-5 is
rescaled to sum exactly 1; a deviation beyond 1e-3 is an error. Rows already
within the 1e-5 band are left untouched, which makes load(save(s)) bit-exact
on the float32 payload for valid data.

Manifest: CSV with header ``id,label,seq_path,wav_path,ref,hyp``. Optional
columns may be empty. Relative paths resolve against the manifest's
directory.

WAV: RIFF PCM, 16-bit, mono only. Samples are kept on the int16 scale
(-32768..32767) because the loudness metrics are scale-sensitive.
"""

from __future__ import annotations

import csv
import os
import re
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DistriblockError

DBK_MAGIC = b"DBK1"
ROW_SUM_HARD_TOL = 1e-3
ROW_SUM_SOFT_TOL = 1e-5

_HEADER_RE = re.compile(r"^id=(\S+) T=(\d+) V=(\d+)$")


@dataclass
class DistributionSequence:
    """Per-step categorical distributions over an output vocabulary.

    ``steps`` is a T x |V| float64 matrix; every row is a probability
    distribution (entries in [0, 1], rows summing to 1 within 1e-5).
    """

    utterance_id: str
    steps: np.ndarray

    def __post_init__(self):
        self.steps = np.asarray(self.steps, dtype=np.float64)
        if self.steps.ndim != 2:
            raise DistriblockError("bad-shape", "steps must be a 2-D matrix")

    @property
    def T(self) -> int:
        return self.steps.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.steps.shape[1]

    def validate(self) -> "DistributionSequence":
        if self.T < 1 or self.vocab_size < 2:
            raise DistriblockError(
                "bad-shape", f"need T >= 1 and V >= 2, got {self.steps.shape}"
            )
        if not np.all(np.isfinite(self.steps)):
            raise DistriblockError("non-finite-entry", "sequence contains non-finite values")
        if self.steps.min() < 0.0 or self.steps.max() > 1.0:
            raise DistriblockError("entry-out-of-range", "probabilities must lie in [0, 1]")
        sums = self.steps.sum(axis=1)
        if np.abs(sums - 1.0).max() > ROW_SUM_SOFT_TOL:
            raise DistriblockError(
                "row-sum-violation",
                f"row sums deviate from 1 by up to {np.abs(sums - 1.0).max():.3g}",
            )
        return self


@dataclass
class AudioSignal:
    """Mono PCM samples on the int16 amplitude scale, stored as float64."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise DistriblockError("empty-signal", "signal must be a non-empty 1-D array")
        if int(self.sample_rate) <= 0:
            raise DistriblockError("bad-sample-rate", "sample_rate must be positive")
        self.sample_rate = int(self.sample_rate)


@dataclass
class ManifestEntry:
    utterance_id: str
    label: str
    seq_path: Path | None = None
    wav_path: Path | None = None
    ref: str | None = None
    hyp: str | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry] = field(default_factory=list)

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.utterance_id: e for e in self.entries}

    def labels(self) -> dict[str, str]:
        return {e.utterance_id: e.label for e in self.entries}


VALID_LABELS = ("benign", "adversarial")
MANIFEST_COLUMNS = ("id", "label", "seq_path", "wav_path", "ref", "hyp")


def _normalize_rows(steps: np.ndarray) -> np.ndarray:
    """Floor at 0 and rescale out-of-band rows; reject hopeless ones."""
    if not np.all(np.isfinite(steps)):
        raise DistriblockError("non-finite-entry", "sequence contains non-finite values")
    steps = np.maximum(steps, 0.0)
    sums = steps.sum(axis=1)
    bad = np.abs(sums - 1.0) > ROW_SUM_HARD_TOL
    if np.any(bad):
        t = int(np.argmax(bad))
        raise DistriblockError(
            "row-sum-violation", f"row {t} sums to {sums[t]:.6g}, outside 1 +/- {ROW_SUM_HARD_TOL}"
        )
    fix = (np.abs(sums - 1.0) > ROW_SUM_SOFT_TOL) | (steps.max(axis=1) > 1.0)
    if np.any(fix):
        steps = steps.copy()
        steps[fix] /= sums[fix, None]
    return steps


def load_sequence(path: str | Path) -> DistributionSequence:
    """Read and validate a `.dbk` file."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DistriblockError("file-not-found", f"cannot read {path}: {exc}") from exc
    if blob[:4] != DBK_MAGIC:
        raise DistriblockError("bad-magic", f"{path} is not a DBK1 file")
    nl = blob.find(b"\n", 4)
    if nl < 0:
        raise DistriblockError("malformed-header", f"{path}: missing header line")
    try:
        header = blob[4:nl].decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DistriblockError("malformed-header", f"{path}: header is not UTF-8") from exc
    m = _HEADER_RE.match(header)
    if not m:
        raise DistriblockError("malformed-header", f"{path}: bad header {header!r}")
    utterance_id, t, v = m.group(1), int(m.group(2)), int(m.group(3))
    if t < 1 or v < 2:
        raise DistriblockError("bad-shape", f"{path}: need T >= 1 and V >= 2, got T={t} V={v}")
    payload = blob[nl + 1 :]
    expected = t * v * 4
    if len(payload) != expected:
        raise DistriblockError(
            "truncated-payload", f"{path}: expected {expected} payload bytes, got {len(payload)}"
        )
    steps = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(t, v)
    steps = _normalize_rows(steps)
    return DistributionSequence(utterance_id, steps).validate()


def save_sequence(seq: DistributionSequence, path: str | Path) -> None:
    seq.validate()
    if re.search(r"\s", seq.utterance_id) or not seq.utterance_id:
        raise DistriblockError("bad-utterance-id", "utterance_id must be non-empty without whitespace")
    header = f"id={seq.utterance_id} T={seq.T} V={seq.vocab_size}\n".encode("utf-8")
    payload = seq.steps.astype("<f4").tobytes()
    _atomic_write_bytes(Path(path), DBK_MAGIC + header + payload)


def write_matrix(utterance_id: str, matrix: np.ndarray, path: str | Path) -> None:
    """Write an arbitrary matrix in the `.dbk` container (no validation).

    Used for gradient dumps; such files are not loadable via load_sequence
    because their rows are not distributions. Read them with read_matrix.
    """
    matrix = np.asarray(matrix, dtype=np.float64)
    header = f"id={utterance_id} T={matrix.shape[0]} V={matrix.shape[1]}\n".encode("utf-8")
    _atomic_write_bytes(Path(path), DBK_MAGIC + header + matrix.astype("<f4").tobytes())


def read_matrix(path: str | Path) -> tuple[str, np.ndarray]:
    """Read a `.dbk` container as a raw matrix, skipping distribution checks."""
    blob = Path(path).read_bytes()
    if blob[:4] != DBK_MAGIC:
        raise DistriblockError("bad-magic", f"{path} is not a DBK1 file")
    nl = blob.find(b"\n", 4)
    m = _HEADER_RE.match(blob[4:nl].decode("utf-8")) if nl > 0 else None
    if not m:
        raise DistriblockError("malformed-header", f"{path}: bad header")
    t, v = int(m.group(2)), int(m.group(3))
    steps = np.frombuffer(blob[nl + 1 :], dtype="<f4").astype(np.float64)
    if steps.size != t * v:
        raise DistriblockError("truncated-payload", f"{path}: payload size mismatch")
    return m.group(1), steps.reshape(t, v)


def load_wav(path: str | Path) -> AudioSignal:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            if wf.getcomptype() != "NONE":
                raise DistriblockError("non-pcm-encoding", f"{path}: compressed WAV not supported")
            if wf.getsampwidth() != 2:
                raise DistriblockError(
                    "non-pcm-encoding", f"{path}: need 16-bit PCM, got {8 * wf.getsampwidth()}-bit"
                )
            if wf.getnchannels() != 1:
                raise DistriblockError("mono-required", f"{path}: {wf.getnchannels()} channels")
            n = wf.getnframes()
            raw = wf.readframes(n)
            if len(raw) != 2 * n:
                raise DistriblockError("truncated-file", f"{path}: fewer frames than declared")
            rate = wf.getframerate()
    except wave.Error as exc:
        code = "non-pcm-encoding" if "format" in str(exc).lower() else "truncated-file"
        raise DistriblockError(code, f"{path}: {exc}") from exc
    except EOFError as exc:
        raise DistriblockError("truncated-file", f"{path}: unexpected end of file") from exc
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return AudioSignal(samples, rate)


def save_wav(signal: AudioSignal, path: str | Path) -> None:
    """Write 16-bit PCM mono; samples are clamped to int16 and rounded."""
    clipped = np.clip(signal.samples, -32768.0, 32767.0)
    data = np.rint(clipped).astype("<i2").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with wave.open(str(tmp), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(signal.sample_rate)
        wf.writeframes(data)
    os.replace(tmp, path)


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    base = path.parent
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DistriblockError("file-not-found", f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_COLUMNS:
            raise DistriblockError(
                "malformed-header", f"{path}: manifest header must be {','.join(MANIFEST_COLUMNS)}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise DistriblockError("malformed-row", f"{path}:{lineno}: expected 6 fields")
            uid, label, seq_p, wav_p, ref, hyp = (c.strip() for c in row)
            if uid in seen:
                raise DistriblockError("duplicate-id", f"{path}:{lineno}: duplicate id {uid!r}")
            seen.add(uid)
            if label not in VALID_LABELS:
                raise DistriblockError("bad-label", f"{path}:{lineno}: label {label!r}")
            entry = ManifestEntry(uid, label)
            for attr, p in (("seq_path", seq_p), ("wav_path", wav_p)):
                if p:
                    resolved = Path(p) if os.path.isabs(p) else base / p
                    if not resolved.exists():
                        raise DistriblockError(
                            "missing-file", f"{path}:{lineno}: {p} does not exist"
                        )
                    setattr(entry, attr, resolved)
            entry.ref = ref or None
            entry.hyp = hyp or None
            entries.append(entry)
    return DatasetManifest(entries)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    rows = [",".join(MANIFEST_COLUMNS)]
    for e in manifest.entries:
        seq_p = _portable_path(e.seq_path, path.parent)
        wav_p = _portable_path(e.wav_path, path.parent)
        cells = [e.utterance_id, e.label, seq_p, wav_p, e.ref or "", e.hyp or ""]
        rows.append(",".join(_csv_cell(c) for c in cells))
    _atomic_write_bytes(path, ("\n".join(rows) + "\n").encode("utf-8"))


def _portable_path(p: Path | None, base: Path) -> str:
    """Store paths relative to the manifest's directory when possible.

    Entry paths are interpreted the usual way (absolute, or relative to the
    current working directory); relpath resolves both sides consistently.
    """
    if p is None:
        return ""
    try:
        return os.path.relpath(p, base if str(base) else ".")
    except ValueError:
        return str(p)


def _csv_cell(value: str) -> str:
    if any(ch in value for ch in ',"\n'):
        return '"' + value.replace('"', '""') + '"'
    return value


def _atomic_write_bytes(path: Path, data: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
