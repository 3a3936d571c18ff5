"""Per-step distribution characteristics and their per-utterance scores.

Six characteristics are computed for a sequence of output distributions:
Shannon entropy, the Kullback-Leibler and Jensen-Shannon divergences
between consecutive steps, and the median / minimum / maximum probability
of each step. Each characteristic vector is then aggregated over time with
mean, median, min and max, yielding 24 scores per utterance.

All information measures use the natural logarithm (nats).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DistriblockError
from .interchange import DistributionSequence

KLD_EPS = 1e-12

AGGREGATORS = ("mean", "median", "min", "max")
CHARACTERISTICS = ("entropy", "kld", "jsd", "median", "min", "max")

#: Fixed column order for score tables: aggregator-major, characteristic-minor.
SCORE_KEYS: tuple[tuple[str, str], ...] = tuple(
    (agg, char) for agg in AGGREGATORS for char in CHARACTERISTICS
)


def score_key_name(key: tuple[str, str]) -> str:
    return f"{key[0]}-{key[1]}"


def parse_score_key(name: str) -> tuple[str, str]:
    agg, _, char = name.partition("-")
    if (agg, char) not in SCORE_KEYS:
        raise DistriblockError("bad-score-key", f"unknown score key {name!r}")
    return agg, char


def entropy(p) -> float:
    """Shannon entropy of a distribution, in nats; 0*ln(0) := 0."""
    p = np.asarray(p, dtype=np.float64)
    terms = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    return float(-terms.sum())


def _floor_renorm(p: np.ndarray) -> np.ndarray:
    p = np.maximum(p, KLD_EPS)
    return p / p.sum(axis=-1, keepdims=True)


def kld(p, q) -> float:
    """KL divergence KL(p || q) in nats.

    Both arguments are floored at 1e-12 and renormalized first, so the
    result stays finite even when q has zero-probability entries.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DistriblockError("length-mismatch", f"shapes {p.shape} vs {q.shape}")
    p = _floor_renorm(p)
    q = _floor_renorm(q)
    return float(np.sum(p * np.log(p / q)))


def jsd(p, q) -> float:
    """Jensen-Shannon divergence in nats: the symmetrized, bounded KLD."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise DistriblockError("length-mismatch", f"shapes {p.shape} vs {q.shape}")
    m = 0.5 * (p + q)
    return 0.5 * kld(p, m) + 0.5 * kld(q, m)


@dataclass
class StepCharacteristics:
    """Per-step characteristic vectors; kld/jsd have length T-1."""

    entropy: np.ndarray
    kld: np.ndarray
    jsd: np.ndarray
    median_prob: np.ndarray
    min_prob: np.ndarray
    max_prob: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            "entropy": self.entropy,
            "kld": self.kld,
            "jsd": self.jsd,
            "median": self.median_prob,
            "min": self.min_prob,
            "max": self.max_prob,
        }


@dataclass
class ScoreSet:
    """The 24 aggregated scores of one utterance."""

    utterance_id: str
    scores: dict[tuple[str, str], float]

    def __getitem__(self, key: tuple[str, str]) -> float:
        return self.scores[key]

    def vector(self) -> np.ndarray:
        """Scores as a length-24 vector in the fixed column order."""
        return np.array([self.scores[k] for k in SCORE_KEYS], dtype=np.float64)

    @classmethod
    def from_vector(cls, utterance_id: str, values) -> "ScoreSet":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (len(SCORE_KEYS),):
            raise DistriblockError("bad-shape", "expected 24 score values")
        return cls(utterance_id, dict(zip(SCORE_KEYS, values.tolist())))

    def validate(self) -> "ScoreSet":
        if set(self.scores) != set(SCORE_KEYS):
            raise DistriblockError("bad-score-key", "score set must hold exactly the 24 keys")
        if not np.all(np.isfinite(self.vector())):
            raise DistriblockError("non-finite-entry", "scores must be finite")
        return self


def step_characteristics(seq: DistributionSequence) -> StepCharacteristics:
    """Compute the six per-step vectors for a sequence.

    For T = 1 the divergence vectors are empty.
    """
    rows = seq.steps
    ent = -np.sum(np.where(rows > 0.0, rows * np.log(np.where(rows > 0.0, rows, 1.0)), 0.0), axis=1)
    if seq.T > 1:
        p = _floor_renorm(rows[:-1])
        q = _floor_renorm(rows[1:])
        klds = np.sum(p * np.log(p / q), axis=1)
        mm = _floor_renorm(0.5 * (rows[:-1] + rows[1:]))
        jsds = 0.5 * np.sum(p * np.log(p / mm), axis=1) + 0.5 * np.sum(q * np.log(q / mm), axis=1)
    else:
        klds = np.empty(0)
        jsds = np.empty(0)
    return StepCharacteristics(
        entropy=ent,
        kld=klds,
        jsd=jsds,
        median_prob=np.median(rows, axis=1),
        min_prob=rows.min(axis=1),
        max_prob=rows.max(axis=1),
    )


def _aggregate(vec: np.ndarray, agg: str) -> float:
    if vec.size == 0:
        return 0.0
    if agg == "mean":
        return float(vec.mean())
    if agg == "median":
        return float(np.median(vec))
    if agg == "min":
        return float(vec.min())
    return float(vec.max())


def score_set(seq: DistributionSequence) -> ScoreSet:
    """Aggregate all six characteristic vectors with all four aggregators.

    A single-step sequence has no step-to-step divergences; its eight
    divergence scores are defined as 0.
    """
    chars = step_characteristics(seq).as_dict()
    scores = {
        (agg, char): _aggregate(chars[char], agg) for agg, char in SCORE_KEYS
    }
    return ScoreSet(seq.utterance_id, scores).validate()


def save_score_table(score_sets: list[ScoreSet], path) -> None:
    """Write a score table CSV: id column plus the 24 fixed-order columns."""
    from .interchange import _atomic_write_bytes
    from pathlib import Path

    lines = ["id," + ",".join(score_key_name(k) for k in SCORE_KEYS)]
    for ss in score_sets:
        ss.validate()
        lines.append(ss.utterance_id + "," + ",".join(repr(v) for v in ss.vector().tolist()))
    _atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))


def load_score_table(path) -> list[ScoreSet]:
    import csv
    from pathlib import Path

    expected = ["id"] + [score_key_name(k) for k in SCORE_KEYS]
    try:
        fh = open(Path(path), newline="", encoding="utf-8")
    except OSError as exc:
        raise DistriblockError("file-not-found", f"cannot read {path}: {exc}") from exc
    out: list[ScoreSet] = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise DistriblockError("malformed-header", f"{path}: bad score-table header")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(expected):
                raise DistriblockError("malformed-row", f"{path}:{lineno}: expected 25 fields")
            try:
                values = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise DistriblockError("malformed-row", f"{path}:{lineno}: {exc}") from exc
            out.append(ScoreSet.from_vector(row[0], values).validate())
    return out
