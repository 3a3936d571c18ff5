"""Detector families: Gaussian score classifiers, majority-vote ensembles,
and a small fully-connected network over all 24 scores.

The Gaussian classifier fits mean/std to one score on benign data only and
flags inputs whose density under that Gaussian falls below a threshold tau.
tau is placed so that at most a ``fpr_budget`` fraction of the benign
training scores would be flagged; because the density is unimodal this is
equivalent to a two-sided cut on |z| = |x - mu| / sigma.

The network is 24 -> 72 -> 72 -> 72 -> 1 with ReLU hidden units and a
sigmoid output giving the probability of the adversarial class. Training is
full-batch Adam on binary cross-entropy, deterministic for a given seed.
Inputs are z-normalized with statistics frozen into the model.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .characteristics import SCORE_KEYS, ScoreSet, parse_score_key, score_key_name
from .errors import DistriblockError
from .interchange import _atomic_write_bytes

SIGMA_FLOOR = 1e-9
BENIGN, ADVERSARIAL = "benign", "adversarial"

MLP_LAYER_SIZES = (24, 72, 72, 72, 1)
DBM_MAGIC = b"DBM1"
_KIND_GAUSSIAN, _KIND_ENSEMBLE, _KIND_MLP = 1, 2, 3


@dataclass
class GaussianModel:
    characteristic_key: tuple[str, str]
    mu: float
    sigma: float
    tau: float

    def validate(self) -> "GaussianModel":
        if self.sigma < SIGMA_FLOOR:
            raise DistriblockError("bad-model", "sigma below floor")
        if not (0.0 <= self.tau <= self.density(self.mu) * (1 + 1e-12)):
            raise DistriblockError("bad-model", "tau outside [0, peak density]")
        return self

    def density(self, score: float) -> float:
        z = (score - self.mu) / self.sigma
        return float(np.exp(-0.5 * z * z) / (self.sigma * np.sqrt(2.0 * np.pi)))

    def density_many(self, scores: np.ndarray) -> np.ndarray:
        z = (np.asarray(scores, dtype=np.float64) - self.mu) / self.sigma
        return np.exp(-0.5 * z * z) / (self.sigma * np.sqrt(2.0 * np.pi))


@dataclass
class EnsembleModel:
    members: list[GaussianModel]

    def validate(self) -> "EnsembleModel":
        k = len(self.members)
        if k < 1 or k % 2 == 0:
            raise DistriblockError("bad-model", "ensemble size must be odd")
        keys = [m.characteristic_key for m in self.members]
        if len(set(keys)) != len(keys):
            raise DistriblockError("bad-model", "ensemble member keys must be distinct")
        for m in self.members:
            m.validate()
        return self


@dataclass
class MlpModel:
    input_mean: np.ndarray
    input_std: np.ndarray
    weights: list[tuple[np.ndarray, np.ndarray]]  # (W, b) per layer
    training_seed: int

    def validate(self) -> "MlpModel":
        if self.input_mean.shape != (24,) or self.input_std.shape != (24,):
            raise DistriblockError("bad-model", "input stats must have 24 entries")
        sizes = MLP_LAYER_SIZES
        if len(self.weights) != len(sizes) - 1:
            raise DistriblockError("bad-model", "wrong layer count")
        for li, (w, b) in enumerate(self.weights):
            if w.shape != (sizes[li], sizes[li + 1]) or b.shape != (sizes[li + 1],):
                raise DistriblockError("bad-model", f"layer {li} has shape {w.shape}")
        return self


@dataclass
class RankingTable:
    """Characteristic keys ordered by validation AUROC, best first."""

    entries: list[tuple[tuple[str, str], float]] = field(default_factory=list)

    def validate(self) -> "RankingTable":
        aucs = [a for _, a in self.entries]
        if any(not (0.0 <= a <= 1.0) for a in aucs):
            raise DistriblockError("bad-ranking", "AUROC values must lie in [0, 1]")
        if any(a < b for a, b in zip(aucs, aucs[1:])):
            raise DistriblockError("bad-ranking", "AUROC values must be non-increasing")
        return self

    def top_keys(self, k: int) -> list[tuple[str, str]]:
        if k > len(self.entries):
            raise DistriblockError("bad-ranking", f"ranking has only {len(self.entries)} entries")
        return [key for key, _ in self.entries[:k]]

    def to_csv(self, path: str | Path) -> None:
        lines = ["characteristic,auroc"]
        for key, auc in self.validate().entries:
            lines.append(f"{score_key_name(key)},{auc:.6f}")
        _atomic_write_bytes(Path(path), ("\n".join(lines) + "\n").encode("utf-8"))

    @classmethod
    def from_csv(cls, path: str | Path) -> "RankingTable":
        import csv

        entries = []
        with open(Path(path), newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["characteristic", "auroc"]:
                raise DistriblockError("malformed-header", f"{path}: bad ranking header")
            for row in reader:
                if not row:
                    continue
                entries.append((parse_score_key(row[0]), float(row[1])))
        return cls(entries).validate()


def fit_gaussian(
    benign_scores, characteristic_key: tuple[str, str], fpr_budget: float = 0.01
) -> GaussianModel:
    """Fit mean/std on benign scores and place the density threshold.

    sigma is the population (1/n) standard deviation, floored at 1e-9.
    tau is chosen between the k-th and (k+1)-th largest training |z| with
    k = floor(fpr_budget * n), so the training false-positive fraction never
    exceeds the budget.
    """
    scores = np.asarray(benign_scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size < 2:
        raise DistriblockError("too-few-scores", "need at least 2 benign scores")
    if not np.all(np.isfinite(scores)):
        raise DistriblockError("non-finite-entry", "scores must be finite")
    if not 0.0 <= fpr_budget <= 1.0:
        raise DistriblockError("bad-threshold-rule", "fpr_budget must lie in [0, 1]")
    mu = float(scores.mean())
    sigma = max(float(scores.std()), SIGMA_FLOOR)
    absz = np.sort(np.abs((scores - mu) / sigma))[::-1]
    k = int(np.floor(fpr_budget * scores.size))
    if k <= 0:
        z_cut = float(absz[0])
    elif k >= scores.size:
        z_cut = 0.0
    else:
        z_cut = float((absz[k - 1] + absz[k]) / 2.0)
    tau = float(np.exp(-0.5 * z_cut * z_cut) / (sigma * np.sqrt(2.0 * np.pi)))
    return GaussianModel(tuple(characteristic_key), mu, sigma, tau).validate()


def classify_gaussian(model: GaussianModel, score: float) -> tuple[str, float]:
    """Verdict plus margin = density(score) - tau; positive margin = benign."""
    if not np.isfinite(score):
        raise DistriblockError("non-finite-entry", "score must be finite")
    margin = model.density(score) - model.tau
    return (ADVERSARIAL if margin < 0.0 else BENIGN), float(margin)


def gaussian_stat(model: GaussianModel, scores) -> np.ndarray:
    """Detection statistic for ROC work: negative density (higher = adversarial)."""
    return -model.density_many(np.asarray(scores, dtype=np.float64))


def rank_characteristics(
    score_sets: list[ScoreSet], labels: list[str], fpr_budget: float = 0.01
) -> RankingTable:
    """Rank all 24 keys by AUROC of the benign-fit Gaussian detector.

    Ties are broken by the fixed score-column order.
    """
    from .evaluation import auroc

    if len(score_sets) != len(labels):
        raise DistriblockError("length-mismatch", "score sets and labels differ in length")
    labels = list(labels)
    if BENIGN not in labels or ADVERSARIAL not in labels:
        raise DistriblockError("single-class", "need both classes to rank characteristics")
    benign_idx = [i for i, l in enumerate(labels) if l == BENIGN]
    adv_idx = [i for i, l in enumerate(labels) if l == ADVERSARIAL]
    results = []
    for order, key in enumerate(SCORE_KEYS):
        col = np.array([ss[key] for ss in score_sets])
        model = fit_gaussian(col[benign_idx], key, fpr_budget)
        stat = gaussian_stat(model, col)
        auc = auroc(stat[benign_idx], stat[adv_idx], higher_is_adversarial=True)
        results.append((auc, -order, key))
    results.sort(key=lambda r: (-r[0], -r[1]))
    return RankingTable([(key, auc) for auc, _, key in results]).validate()


def build_ensemble(
    ranking: RankingTable, score_sets: list[ScoreSet], labels: list[str], k: int,
    fpr_budget: float = 0.01,
) -> EnsembleModel:
    """Top-k ensemble; members are fit on the benign rows of ``score_sets``."""
    if k not in (3, 5, 7, 9):
        raise DistriblockError("bad-ensemble-size", "ensemble size must be one of 3, 5, 7, 9")
    benign_rows = [ss for ss, l in zip(score_sets, labels) if l == BENIGN]
    if len(benign_rows) < 2:
        raise DistriblockError("too-few-scores", "need at least 2 benign score sets")
    members = []
    for key in ranking.top_keys(k):
        col = np.array([ss[key] for ss in benign_rows])
        members.append(fit_gaussian(col, key, fpr_budget))
    return EnsembleModel(members).validate()


def ensemble_classify(model: EnsembleModel, scores: ScoreSet) -> tuple[str, int]:
    """Majority vote; returns the verdict and the adversarial vote count."""
    model.validate()
    votes = 0
    for member in model.members:
        if member.characteristic_key not in scores.scores:
            raise DistriblockError(
                "missing-key", f"score set lacks {score_key_name(member.characteristic_key)}"
            )
        verdict, _ = classify_gaussian(member, scores[member.characteristic_key])
        votes += verdict == ADVERSARIAL
    k = len(model.members)
    return (ADVERSARIAL if votes > k / 2 else BENIGN), votes


def ensemble_stat(model: EnsembleModel, scores: ScoreSet) -> float:
    """Adversarial vote count as a coarse detection statistic."""
    _, votes = ensemble_classify(model, scores)
    return float(votes)


# --- neural classifier -----------------------------------------------------

def _init_params(seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    rng = np.random.default_rng(seed)
    params = []
    for fan_in, fan_out in zip(MLP_LAYER_SIZES[:-1], MLP_LAYER_SIZES[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        params.append((w, np.zeros(fan_out)))
    return params


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward(params, x: np.ndarray):
    """Returns (probabilities, per-layer activation cache)."""
    cache = [x]
    h = x
    for w, b in params[:-1]:
        h = np.maximum(h @ w + b, 0.0)
        cache.append(h)
    w, b = params[-1]
    p = _sigmoid(h @ w + b)[:, 0]
    return p, cache


def mlp_loss_and_grad(params, x: np.ndarray, y: np.ndarray):
    """Mean binary cross-entropy and its gradient w.r.t. every parameter."""
    n = x.shape[0]
    p, cache = _forward(params, x)
    pc = np.clip(p, 1e-12, 1.0 - 1e-12)
    loss = float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))
    delta = ((p - y) / n)[:, None]
    grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(params)
    for li in range(len(params) - 1, -1, -1):
        w, _ = params[li]
        h_in = cache[li]
        grads[li] = (h_in.T @ delta, delta.sum(axis=0))
        if li > 0:
            delta = (delta @ w.T) * (cache[li] > 0.0)
    return loss, grads


def train_mlp(
    score_sets: list[ScoreSet],
    labels: list[str],
    seed: int = 0,
    epochs: int = 250,
    lr: float = 1e-4,
) -> MlpModel:
    """Full-batch Adam training; bit-deterministic for a given seed."""
    if len(score_sets) != len(labels):
        raise DistriblockError("length-mismatch", "score sets and labels differ in length")
    y = np.array([1.0 if l == ADVERSARIAL else 0.0 for l in labels])
    if (y == 1.0).sum() < 2 or (y == 0.0).sum() < 2:
        raise DistriblockError("single-class", "need at least 2 examples per class")
    raw = np.stack([ss.validate().vector() for ss in score_sets])
    mean = raw.mean(axis=0)
    std = np.maximum(raw.std(axis=0), SIGMA_FLOOR)
    x = (raw - mean) / std

    params = _init_params(seed)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]
    v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in params]
    for t in range(1, epochs + 1):
        _, grads = mlp_loss_and_grad(params, x, y)
        bc1 = 1.0 - beta1**t
        bc2 = 1.0 - beta2**t
        for li, (gw, gb) in enumerate(grads):
            mw, mb = m[li]
            vw, vb = v[li]
            mw = beta1 * mw + (1.0 - beta1) * gw
            mb = beta1 * mb + (1.0 - beta1) * gb
            vw = beta2 * vw + (1.0 - beta2) * gw**2
            vb = beta2 * vb + (1.0 - beta2) * gb**2
            m[li], v[li] = (mw, mb), (vw, vb)
            w, b = params[li]
            params[li] = (
                w - lr * (mw / bc1) / (np.sqrt(vw / bc2) + eps),
                b - lr * (mb / bc1) / (np.sqrt(vb / bc2) + eps),
            )
    return MlpModel(mean, std, params, seed).validate()


def mlp_score(model: MlpModel, scores: ScoreSet) -> float:
    """Adversarial-class probability in (0, 1) for one utterance."""
    return float(mlp_score_batch(model, scores.validate().vector()[None, :])[0])


def mlp_score_batch(model: MlpModel, features: np.ndarray) -> np.ndarray:
    model.validate()
    x = (np.asarray(features, dtype=np.float64) - model.input_mean) / model.input_std
    p, _ = _forward(model.weights, x)
    # saturated sigmoids round to exactly 0/1 in float64; keep the interval open
    return np.clip(p, np.nextafter(0.0, 1.0), np.nextafter(1.0, 0.0))


def mlp_classify(model: MlpModel, scores: ScoreSet, threshold: float = 0.5) -> tuple[str, float]:
    p = mlp_score(model, scores)
    return (ADVERSARIAL if p > threshold else BENIGN), p


def detector_stat(model, scores: ScoreSet) -> float:
    """Detection statistic (higher = more adversarial) for any model kind."""
    if isinstance(model, GaussianModel):
        return float(-model.density(scores[model.characteristic_key]))
    if isinstance(model, EnsembleModel):
        return ensemble_stat(model, scores)
    if isinstance(model, MlpModel):
        return mlp_score(model, scores)
    raise DistriblockError("bad-model", f"unknown model type {type(model).__name__}")


def detector_verdict(model, scores: ScoreSet, nn_threshold: float = 0.5) -> tuple[str, float]:
    """Verdict plus a margin whose sign is positive for benign."""
    if isinstance(model, GaussianModel):
        return classify_gaussian(model, scores[model.characteristic_key])
    if isinstance(model, EnsembleModel):
        verdict, votes = ensemble_classify(model, scores)
        return verdict, len(model.members) / 2.0 - votes
    if isinstance(model, MlpModel):
        verdict, p = mlp_classify(model, scores, nn_threshold)
        return verdict, nn_threshold - p
    raise DistriblockError("bad-model", f"unknown model type {type(model).__name__}")


# --- model container (DBM1) ------------------------------------------------

def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise DistriblockError("truncated-payload", f"{self.path}: model file truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def text(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def f64s(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").copy()


def _gaussian_bytes(model: GaussianModel) -> bytes:
    agg, char = model.characteristic_key
    return (
        _pack_str(agg)
        + _pack_str(char)
        + struct.pack("<3d", model.mu, model.sigma, model.tau)
    )


def _read_gaussian(r: _Reader) -> GaussianModel:
    agg, char = r.text(), r.text()
    mu, sigma, tau = struct.unpack("<3d", r.take(24))
    return GaussianModel((agg, char), mu, sigma, tau).validate()


def save_model(model, path: str | Path) -> None:
    """Serialize a detector to the versioned DBM1 container."""
    if isinstance(model, GaussianModel):
        body = bytes([_KIND_GAUSSIAN]) + _gaussian_bytes(model.validate())
    elif isinstance(model, EnsembleModel):
        model.validate()
        body = bytes([_KIND_ENSEMBLE]) + struct.pack("<I", len(model.members))
        for member in model.members:
            body += _gaussian_bytes(member)
    elif isinstance(model, MlpModel):
        model.validate()
        body = bytes([_KIND_MLP]) + struct.pack("<q", model.training_seed)
        body += model.input_mean.astype("<f8").tobytes()
        body += model.input_std.astype("<f8").tobytes()
        for w, b in model.weights:
            body += struct.pack("<II", *w.shape)
            body += w.astype("<f8").tobytes() + b.astype("<f8").tobytes()
    else:
        raise DistriblockError("bad-model", f"cannot serialize {type(model).__name__}")
    _atomic_write_bytes(Path(path), DBM_MAGIC + bytes([1]) + body)


def load_model(path: str | Path):
    """Read any DBM1 model; returns a Gaussian, ensemble, or network model."""
    blob = Path(path).read_bytes()
    if blob[:4] != DBM_MAGIC:
        raise DistriblockError("bad-magic", f"{path} is not a DBM1 file")
    r = _Reader(blob, path)
    r.take(4)
    version = r.u8()
    if version != 1:
        raise DistriblockError("bad-version", f"{path}: unsupported model version {version}")
    kind = r.u8()
    if kind == _KIND_GAUSSIAN:
        return _read_gaussian(r)
    if kind == _KIND_ENSEMBLE:
        k = r.u32()
        return EnsembleModel([_read_gaussian(r) for _ in range(k)]).validate()
    if kind == _KIND_MLP:
        seed = r.i64()
        mean = r.f64s(24)
        std = r.f64s(24)
        weights = []
        for _ in range(len(MLP_LAYER_SIZES) - 1):
            rows, cols = r.u32(), r.u32()
            w = r.f64s(rows * cols).reshape(rows, cols)
            b = r.f64s(cols)
            weights.append((w, b))
        return MlpModel(mean, std, weights, seed).validate()
    raise DistriblockError("bad-model-kind", f"{path}: unknown model kind {kind}")
