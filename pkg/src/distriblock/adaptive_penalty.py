"""Penalty terms that defense-aware attacks add to their loss.

Five variants are supported. Against a single Gaussian classifier the
penalty is |target_mean - score(x)|; against an ensemble it is the sum of
those terms over the members; against the network it is |p(x) - 1| where p
is the network output. Two sequence-level variants measure divergence
structure against a reference sequence: ``kld_diff`` compares the
step-to-step KLD profiles, ``kld_align`` sums the per-step KLD between the
reference and the query. All values are in nats and non-negative, and each
is exactly 0 at its target.

The combined attack loss is (1 - alpha) * base_loss + alpha * penalty;
``base_loss`` is an opaque scalar supplied by the attack code.

``penalty_grad_fd`` provides central finite differences through the
row-renormalization map, letting external attack loops consume gradients
without an autodiff bridge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .characteristics import kld, score_set
from .classifiers import MlpModel, mlp_score
from .errors import DistriblockError
from .interchange import DistributionSequence

VARIANTS = ("gc", "ensemble", "nn", "kld_diff", "kld_align")


@dataclass
class PenaltySpec:
    variant: str
    gc_target: tuple[float, tuple[str, str]] | None = None
    ensemble_targets: list[tuple[float, tuple[str, str]]] | None = None
    nn_model: MlpModel | None = None
    reference: DistributionSequence | None = None

    @classmethod
    def gc(cls, target_mean: float, key: tuple[str, str]) -> "PenaltySpec":
        return cls("gc", gc_target=(target_mean, tuple(key)))

    @classmethod
    def ensemble(cls, targets: list[tuple[float, tuple[str, str]]]) -> "PenaltySpec":
        return cls("ensemble", ensemble_targets=[(m, tuple(k)) for m, k in targets])

    @classmethod
    def nn(cls, model: MlpModel) -> "PenaltySpec":
        return cls("nn", nn_model=model)

    @classmethod
    def kld_diff(cls, reference: DistributionSequence) -> "PenaltySpec":
        return cls("kld_diff", reference=reference)

    @classmethod
    def kld_align(cls, reference: DistributionSequence) -> "PenaltySpec":
        return cls("kld_align", reference=reference)

    def validate(self) -> "PenaltySpec":
        if self.variant not in VARIANTS:
            raise DistriblockError("bad-variant", f"unknown penalty variant {self.variant!r}")
        needed = {
            "gc": self.gc_target,
            "ensemble": self.ensemble_targets,
            "nn": self.nn_model,
            "kld_diff": self.reference,
            "kld_align": self.reference,
        }[self.variant]
        if needed is None or (self.variant == "ensemble" and not self.ensemble_targets):
            raise DistriblockError("missing-target", f"variant {self.variant!r} lacks its target")
        return self


@dataclass
class AdaptiveLoss:
    alpha: float
    base_loss: float

    def validate(self) -> "AdaptiveLoss":
        if not 0.0 <= self.alpha <= 1.0:
            raise DistriblockError("bad-alpha", "alpha must lie in [0, 1]")
        if not np.isfinite(self.base_loss):
            raise DistriblockError("non-finite-entry", "base loss must be finite")
        return self


def _step_klds(seq: DistributionSequence) -> np.ndarray:
    rows = seq.steps
    return np.array([kld(rows[t], rows[t + 1]) for t in range(seq.T - 1)])


def penalty(spec: PenaltySpec, seq: DistributionSequence) -> float:
    """Non-negative penalty of the sequence under the chosen variant."""
    spec.validate()
    if spec.variant == "gc":
        target_mean, key = spec.gc_target
        return abs(target_mean - score_set(seq)[key])
    if spec.variant == "ensemble":
        scores = score_set(seq)
        return float(sum(abs(m - scores[key]) for m, key in spec.ensemble_targets))
    if spec.variant == "nn":
        return abs(mlp_score(spec.nn_model, score_set(seq)) - 1.0)
    ref = spec.reference
    if spec.variant == "kld_diff":
        if ref.T != seq.T:
            raise DistriblockError("sequence-shape-mismatch", "reference and query need equal T")
        return float(np.abs(_step_klds(ref) - _step_klds(seq)).sum())
    if ref.T != seq.T or ref.vocab_size != seq.vocab_size:
        raise DistriblockError("sequence-shape-mismatch", "reference and query need equal T and V")
    return float(sum(abs(kld(ref.steps[t], seq.steps[t])) for t in range(seq.T)))


def combined_loss(adaptive: AdaptiveLoss, penalty_value: float) -> float:
    """(1 - alpha) * base_loss + alpha * penalty."""
    adaptive.validate()
    if not np.isfinite(penalty_value):
        raise DistriblockError("non-finite-entry", "penalty value must be finite")
    return (1.0 - adaptive.alpha) * adaptive.base_loss + adaptive.alpha * penalty_value


def penalty_grad_fd(spec: PenaltySpec, seq: DistributionSequence, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of the penalty w.r.t. every matrix entry.

    Each probe perturbs one entry, floors the row at 0, renormalizes it, and
    re-evaluates the penalty; the gradient is therefore taken through the
    renormalized-input composition. Deterministic by construction.
    """
    spec.validate()
    base = seq.steps
    grad = np.zeros_like(base)
    for t in range(base.shape[0]):
        for i in range(base.shape[1]):
            up = _probe(seq, base, t, i, +h)
            down = _probe(seq, base, t, i, -h)
            fu = penalty(spec, up)
            fd = penalty(spec, down)
            if not (np.isfinite(fu) and np.isfinite(fd)):
                raise DistriblockError("non-finite-entry", f"penalty diverged at probe ({t}, {i})")
            grad[t, i] = (fu - fd) / (2.0 * h)
    return grad


def _probe(seq: DistributionSequence, base: np.ndarray, t: int, i: int, delta: float) -> DistributionSequence:
    steps = base.copy()
    steps[t, i] = max(steps[t, i] + delta, 0.0)
    steps[t] /= steps[t].sum()
    return DistributionSequence(seq.utterance_id, steps)
