"""ROC/PR evaluation, conservative threshold selection, confusion reports.

Conventions: the adversarial class is the positive class everywhere. A
detection statistic is "adversarialness" — callers say whether higher or
lower raw values indicate an attack and the functions normalize internally.

Tie handling: operating points are taken at every distinct statistic value,
which makes the trapezoidal AUROC equal the Mann-Whitney statistic
P(adv > benign) + 0.5 * P(adv = benign) exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import DistriblockError


@dataclass
class ThresholdRule:
    """Operating-point constraints: FPR budget plus a TPR floor."""

    max_fpr: float = 0.01
    min_tpr: float = 0.5

    def validate(self) -> "ThresholdRule":
        if not (0.0 <= self.max_fpr <= 1.0 and 0.0 <= self.min_tpr <= 1.0):
            raise DistriblockError("bad-threshold-rule", "rates must lie in [0, 1]")
        return self


@dataclass
class ThresholdResult:
    """Chosen threshold with the rates it achieves on the validation data.

    Verdict rule: adversarial iff stat > threshold (higher_is_adversarial)
    or stat < threshold otherwise. ``relaxed`` marks the fallback branch
    where the FPR budget had to be exceeded to reach the TPR floor.
    """

    threshold: float
    fpr: float
    tpr: float
    relaxed: bool
    higher_is_adversarial: bool = True

    def decide(self, stat: float) -> str:
        if self.higher_is_adversarial:
            return "adversarial" if stat > self.threshold else "benign"
        return "adversarial" if stat < self.threshold else "benign"


@dataclass
class ConfusionMetrics:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    fpr: float
    tpr: float
    precision: float
    recall: float
    f1: float

    def display(self) -> dict[str, str]:
        """Display strings: percent and rates to 2 decimals, ratios to 4, half-up."""
        return {
            "accuracy": _round_str(100.0 * self.accuracy, 2) + "%",
            "fpr": _round_str(self.fpr, 2),
            "tpr": _round_str(self.tpr, 2),
            "precision": _round_str(self.precision, 4),
            "recall": _round_str(self.recall, 4),
            "f1": _round_str(self.f1, 4),
        }


@dataclass
class EvalReport:
    roc_points: list[tuple[float, float]]
    auroc: float
    auprc: float
    confusion: ConfusionMetrics | None = None
    extra: dict = field(default_factory=dict)


def _round_str(x: float, nd: int) -> str:
    return str(Decimal(repr(float(x))).quantize(Decimal("1." + "0" * nd), rounding=ROUND_HALF_UP))


def _as_stats(benign, adv, higher_is_adversarial: bool):
    b = np.asarray(benign, dtype=np.float64)
    a = np.asarray(adv, dtype=np.float64)
    if b.size == 0 or a.size == 0:
        raise DistriblockError("empty-class", "both classes must be non-empty")
    if not (np.all(np.isfinite(b)) and np.all(np.isfinite(a))):
        raise DistriblockError("non-finite-entry", "statistics must be finite")
    if not higher_is_adversarial:
        b, a = -b, -a
    return b, a


def roc_points(benign, adv, higher_is_adversarial: bool = True) -> list[tuple[float, float]]:
    """(FPR, TPR) operating points from (0,0) to (1,1), one per distinct value."""
    b, a = _as_stats(benign, adv, higher_is_adversarial)
    stats = np.concatenate([b, a])
    labels = np.concatenate([np.zeros(b.size), np.ones(a.size)])
    order = np.argsort(-stats, kind="stable")
    stats, labels = stats[order], labels[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    n = stats.size
    while i < n:
        j = i
        while j < n and stats[j] == stats[i]:
            tp += labels[j] == 1
            fp += labels[j] == 0
            j += 1
        points.append((fp / b.size, tp / a.size))
        i = j
    return points


def auroc(benign, adv, higher_is_adversarial: bool = True) -> float:
    """Area under the ROC curve by trapezoidal integration."""
    pts = roc_points(benign, adv, higher_is_adversarial)
    area = 0.0
    for (x0, y0), (x1, y1) in zip(pts[:-1], pts[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return float(area)


def auroc_pairwise(benign, adv, higher_is_adversarial: bool = True) -> float:
    """Mann-Whitney form: P(adv > benign) + 0.5 * P(adv = benign), via midranks."""
    b, a = _as_stats(benign, adv, higher_is_adversarial)
    pooled = np.concatenate([b, a])
    order = np.argsort(pooled, kind="stable")
    ranks = np.empty(pooled.size, dtype=np.float64)
    sorted_vals = pooled[order]
    i = 0
    while i < pooled.size:
        j = i
        while j < pooled.size and sorted_vals[j] == sorted_vals[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j - 1) + 1.0  # midrank, 1-based
        i = j
    rank_sum_adv = ranks[b.size :].sum()
    u = rank_sum_adv - a.size * (a.size + 1) / 2.0
    return float(u / (a.size * b.size))


def auprc(benign, adv, higher_is_adversarial: bool = True) -> float:
    """Area under the precision-recall curve with step-wise interpolation.

    Adversarial is the positive class; ties are grouped so the curve has one
    point per distinct statistic value.
    """
    b, a = _as_stats(benign, adv, higher_is_adversarial)
    stats = np.concatenate([b, a])
    labels = np.concatenate([np.zeros(b.size), np.ones(a.size)])
    order = np.argsort(-stats, kind="stable")
    stats, labels = stats[order], labels[order]
    area = 0.0
    tp = fp = 0
    prev_recall = 0.0
    i = 0
    n = stats.size
    while i < n:
        j = i
        while j < n and stats[j] == stats[i]:
            tp += labels[j] == 1
            fp += labels[j] == 0
            j += 1
        recall = tp / a.size
        precision = tp / (tp + fp)
        area += (recall - prev_recall) * precision
        prev_recall = recall
        i = j
    return float(area)


def _candidate_thresholds(pooled: np.ndarray) -> np.ndarray:
    vals = np.unique(pooled)
    mids = (vals[:-1] + vals[1:]) / 2.0 if vals.size > 1 else np.empty(0)
    return np.concatenate([[-np.inf], mids, [np.inf]])


def select_threshold(
    benign, adv, rule: ThresholdRule | None = None, higher_is_adversarial: bool = True
) -> ThresholdResult:
    """Pick an operating threshold under an FPR budget with a TPR floor.

    Candidates are the midpoints between adjacent distinct statistic values
    plus the two infinities. Primary branch: maximize TPR subject to
    FPR <= max_fpr. If that TPR falls below min_tpr, relax: minimize FPR
    among candidates with TPR >= min_tpr (marked ``relaxed``).
    """
    rule = (rule or ThresholdRule()).validate()
    b, a = _as_stats(benign, adv, higher_is_adversarial)
    cands = _candidate_thresholds(np.concatenate([b, a]))
    # verdict: adversarial iff stat > threshold (in normalized orientation)
    fprs = np.array([(b > t).mean() for t in cands])
    tprs = np.array([(a > t).mean() for t in cands])

    feasible = fprs <= rule.max_fpr
    idx = np.flatnonzero(feasible)
    best = min(idx, key=lambda i: (-tprs[i], fprs[i]))
    relaxed = False
    if tprs[best] < rule.min_tpr:
        idx2 = np.flatnonzero(tprs >= rule.min_tpr)
        if idx2.size > 0:
            best = min(idx2, key=lambda i: (fprs[i], -tprs[i]))
            relaxed = True
    thr = float(cands[best])
    if not higher_is_adversarial:
        thr = -thr
    return ThresholdResult(
        threshold=thr,
        fpr=float(fprs[best]),
        tpr=float(tprs[best]),
        relaxed=relaxed,
        higher_is_adversarial=higher_is_adversarial,
    )


def confusion_report(tp: int, fp: int, tn: int, fn: int) -> ConfusionMetrics:
    """Derived rates from raw confusion counts.

    Precision is defined as 0 when nothing was flagged positive, and F1 as 0
    when precision + recall is 0.
    """
    for name, v in (("tp", tp), ("fp", fp), ("tn", tn), ("fn", fn)):
        if v < 0 or int(v) != v:
            raise DistriblockError("bad-count", f"{name} must be a non-negative integer")
    tp, fp, tn, fn = int(tp), int(fp), int(tn), int(fn)
    if tp + fn == 0:
        raise DistriblockError("empty-class", "no positive examples (tp + fn = 0)")
    if fp + tn == 0:
        raise DistriblockError("empty-class", "no negative examples (fp + tn = 0)")
    total = tp + fp + tn + fn
    tpr = tp / (tp + fn)
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tpr
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return ConfusionMetrics(
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
        accuracy=(tp + tn) / total,
        fpr=fp / (fp + tn),
        tpr=tpr,
        precision=precision,
        recall=recall,
        f1=f1,
    )


def confusion_from_verdicts(verdicts: list[str], labels: list[str]) -> ConfusionMetrics:
    """Count a verdict list against ground-truth labels (adversarial = positive)."""
    if len(verdicts) != len(labels):
        raise DistriblockError("length-mismatch", "verdicts and labels differ in length")
    tp = fp = tn = fn = 0
    for v, l in zip(verdicts, labels):
        if l == "adversarial":
            tp += v == "adversarial"
            fn += v != "adversarial"
        else:
            fp += v == "adversarial"
            tn += v != "adversarial"
    return confusion_report(tp, fp, tn, fn)


def evaluate(benign, adv, higher_is_adversarial: bool = True,
             confusion: ConfusionMetrics | None = None) -> EvalReport:
    return EvalReport(
        roc_points=roc_points(benign, adv, higher_is_adversarial),
        auroc=auroc(benign, adv, higher_is_adversarial),
        auprc=auprc(benign, adv, higher_is_adversarial),
        confusion=confusion,
    )
