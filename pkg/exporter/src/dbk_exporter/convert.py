"""Convert raw per-utterance probability dumps into `.dbk` files.

Dump layout (written by a few lines in the user's decoding script)::

    b"RAW1"                      magic
    uint32 rows, uint32 cols     little-endian
    rows*cols float32            row-major, little-endian

One file per utterance, named ``<utterance_id>.raw``, placed under
``<in_dir>/benign/`` or ``<in_dir>/adversarial/`` — the subdirectory is the
class label. Entries may be probabilities or natural-log probabilities;
files containing any negative value are treated as log-probabilities and
exponentiated first. Rows must then sum to 1 within 1e-3; they are
renormalized before writing.

Output: one ``<utterance_id>.dbk`` per dump plus ``manifest.csv``, both in
the layout the detection pipeline reads (DBK1 container, manifest header
``id,label,seq_path,wav_path,ref,hyp``).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

RAW_MAGIC = b"RAW1"
DBK_MAGIC = b"DBK1"
ROW_SUM_TOL = 1e-3
LABELS = ("benign", "adversarial")
MANIFEST_HEADER = "id,label,seq_path,wav_path,ref,hyp"


class ExportError(Exception):
    """Per-file conversion failure with a stable code."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


@dataclass
class DumpSpec:
    in_dir: Path
    out_dir: Path


@dataclass
class ExportReport:
    exported: list[tuple[str, str, Path]] = field(default_factory=list)  # (id, label, path)
    failures: list[tuple[Path, str, str]] = field(default_factory=list)  # (path, code, message)

    @property
    def ok(self) -> bool:
        return not self.failures


def read_dump(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    if blob[:4] != RAW_MAGIC:
        raise ExportError("bad-magic", "not a RAW1 dump")
    if len(blob) < 12:
        raise ExportError("truncated", "header incomplete")
    rows, cols = struct.unpack("<II", blob[4:12])
    if rows < 1 or cols < 2:
        raise ExportError("bad-shape", f"need rows >= 1 and cols >= 2, got {rows}x{cols}")
    payload = blob[12:]
    if len(payload) != rows * cols * 4:
        raise ExportError("truncated", f"expected {rows * cols * 4} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(rows, cols)


def to_probabilities(values: np.ndarray) -> np.ndarray:
    """Validate and normalize a dump; exponentiates log-probability input."""
    if not np.all(np.isfinite(values)):
        raise ExportError("non-finite-entry", "dump contains NaN or infinity")
    if np.any(values < 0.0):  # log-probability convention
        values = np.exp(values)
    sums = values.sum(axis=1)
    if np.any(sums <= 0.0):
        raise ExportError("ambiguous-zero-row", "a row has no probability mass")
    if np.abs(sums - 1.0).max() > ROW_SUM_TOL:
        worst = int(np.argmax(np.abs(sums - 1.0)))
        raise ExportError(
            "row-sum-violation", f"row {worst} sums to {sums[worst]:.6g} after conversion"
        )
    return values / sums[:, None]


def write_dbk(uid: str, steps: np.ndarray, path: Path) -> None:
    header = f"id={uid} T={steps.shape[0]} V={steps.shape[1]}\n".encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(DBK_MAGIC + header + steps.astype("<f4").tobytes())
    os.replace(tmp, path)


def export(spec: DumpSpec) -> ExportReport:
    """Convert every dump under in_dir; failures are collected, not fatal."""
    report = ExportReport()
    spec.out_dir.mkdir(parents=True, exist_ok=True)
    for label in LABELS:
        class_dir = spec.in_dir / label
        if not class_dir.is_dir():
            continue
        for dump_path in sorted(class_dir.glob("*.raw")):
            uid = dump_path.stem
            try:
                if any(ch.isspace() for ch in uid) or not uid:
                    raise ExportError("bad-utterance-id", "file stem must have no whitespace")
                steps = to_probabilities(read_dump(dump_path))
                out_path = spec.out_dir / f"{uid}.dbk"
                write_dbk(uid, steps, out_path)
                report.exported.append((uid, label, out_path))
            except ExportError as exc:
                report.failures.append((dump_path, exc.code, str(exc)))
    write_manifest(report, spec.out_dir / "manifest.csv")
    return report


def write_manifest(report: ExportReport, path: Path) -> None:
    lines = [MANIFEST_HEADER]
    for uid, label, seq_path in report.exported:
        lines.append(f"{uid},{label},{seq_path.name},,,")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    os.replace(tmp, path)
