"""Transcription error rates (WER/CER/SER) and perturbation noise metrics.

The alignment is a uniform-cost Levenshtein DP. On cost ties the backtrace
prefers substitution over deletion over insertion, which fixes the S/D/I
split (the total edit distance is unaffected).

Noise metrics operate on the int16 amplitude scale:

    db(s)        = max_t 20*log10 |s(t)|
    db_x(delta)  = db(x) - db(delta)          higher = quieter perturbation
    snr_seg      = (10/M') * sum_m log10( E_x(m) / E_delta(m) )

where frames are consecutive non-overlapping blocks of ``frame_len``
samples and frames with zero energy in either signal are excluded (M'
counts the frames kept).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import DistriblockError
from .interchange import AudioSignal

DEFAULT_FRAME_LEN = 256


@dataclass
class ErrorCounts:
    S: int
    D: int
    I: int
    N: int

    def __post_init__(self):
        if min(self.S, self.D, self.I) < 0 or self.N <= 0:
            raise DistriblockError("bad-count", "invalid error counts")
        if self.S + self.D > self.N:
            raise DistriblockError("bad-count", "S + D cannot exceed reference length")

    @property
    def total(self) -> int:
        return self.S + self.D + self.I


@dataclass
class NoiseReport:
    db_x: float
    snr_seg: float
    frames_used: int


def tokenize(text: str) -> list[str]:
    """Lowercase, trim, and split on whitespace."""
    return text.strip().lower().split()


def normalize_chars(text: str) -> str:
    """Lowercase, trim, collapse whitespace runs to single spaces."""
    return " ".join(text.strip().lower().split())


def align(reference: Sequence, hypothesis: Sequence) -> ErrorCounts:
    """Minimal-edit alignment with unit costs; ties prefer S, then D, then I."""
    n, m = len(reference), len(hypothesis)
    if n == 0:
        raise DistriblockError("empty-reference", "reference must be non-empty")
    dist = np.zeros((n + 1, m + 1), dtype=np.int64)
    dist[:, 0] = np.arange(n + 1)
    dist[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        ri = reference[i - 1]
        for j in range(1, m + 1):
            sub = dist[i - 1, j - 1] + (ri != hypothesis[j - 1])
            dele = dist[i - 1, j] + 1
            ins = dist[i, j - 1] + 1
            dist[i, j] = min(sub, dele, ins)
    s = d = ins_count = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and dist[i, j] == dist[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1]):
            s += reference[i - 1] != hypothesis[j - 1]
            i -= 1
            j -= 1
        elif i > 0 and dist[i, j] == dist[i - 1, j] + 1:
            d += 1
            i -= 1
        else:
            ins_count += 1
            j -= 1
    return ErrorCounts(S=s, D=d, I=ins_count, N=n)


def wer(reference: Sequence[str], hypothesis: Sequence[str]) -> tuple[float, ErrorCounts]:
    """Word error rate in percent (may exceed 100) with its S/D/I breakdown.

    Accepts raw strings (tokenized on whitespace after lowercasing) or
    pre-tokenized sequences.
    """
    if isinstance(reference, str):
        reference = tokenize(reference)
    if isinstance(hypothesis, str):
        hypothesis = tokenize(hypothesis)
    counts = align(list(reference), list(hypothesis))
    return 100.0 * counts.total / counts.N, counts


def cer(reference: str, hypothesis: str) -> tuple[float, ErrorCounts]:
    """Character error rate in percent; whitespace runs count as one space."""
    ref = normalize_chars(reference)
    hyp = normalize_chars(hypothesis)
    counts = align(ref, hyp)
    return 100.0 * counts.total / counts.N, counts


def ser(error_flags: Iterable[bool]) -> float:
    """Share of utterances with at least one transcription error, in percent."""
    flags = [bool(f) for f in error_flags]
    if not flags:
        raise DistriblockError("empty-class", "need at least one utterance")
    return 100.0 * sum(flags) / len(flags)


def db(signal: AudioSignal | np.ndarray) -> float:
    """Peak level: max over samples of 20*log10 |s(t)|."""
    samples = signal.samples if isinstance(signal, AudioSignal) else np.asarray(signal, dtype=np.float64)
    peak = np.abs(samples).max()
    if peak <= 0.0:
        raise DistriblockError("all-zero-signal", "signal has no nonzero sample")
    return float(20.0 * np.log10(peak))


def _pair(x: AudioSignal, delta: AudioSignal) -> tuple[np.ndarray, np.ndarray]:
    if x.samples.size != delta.samples.size:
        raise DistriblockError(
            "length-mismatch", f"signal lengths differ: {x.samples.size} vs {delta.samples.size}"
        )
    return x.samples, delta.samples


def db_x(x: AudioSignal, delta: AudioSignal) -> float:
    """Perturbation loudness relative to the carrier: db(x) - db(delta)."""
    xs, ds = _pair(x, delta)
    return db(xs) - db(ds)


def snr_seg(x: AudioSignal, delta: AudioSignal, frame_len: int = DEFAULT_FRAME_LEN) -> float:
    """Segmental SNR in dB over full non-overlapping frames."""
    report = noise_report(x, delta, frame_len)
    return report.snr_seg


def noise_report(x: AudioSignal, delta: AudioSignal, frame_len: int = DEFAULT_FRAME_LEN) -> NoiseReport:
    xs, ds = _pair(x, delta)
    if frame_len < 1:
        raise DistriblockError("bad-frame-len", "frame_len must be positive")
    if xs.size < frame_len:
        raise DistriblockError("length-mismatch", "signal shorter than one frame")
    m = xs.size // frame_len
    ex = (xs[: m * frame_len].reshape(m, frame_len) ** 2).sum(axis=1)
    ed = (ds[: m * frame_len].reshape(m, frame_len) ** 2).sum(axis=1)
    keep = (ex > 0.0) & (ed > 0.0)
    used = int(keep.sum())
    if used == 0:
        raise DistriblockError("no-usable-frame", "every frame has zero energy in x or delta")
    value = 10.0 / used * np.sum(np.log10(ex[keep] / ed[keep]))
    return NoiseReport(db_x=db_x(x, delta), snr_seg=float(value), frames_used=used)
