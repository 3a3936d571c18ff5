"""Synthetic benign/adversarial sequence generator.

Desk-scale stand-in for real decoder outputs: benign sequences are sharply
peaked (a dominant token holding ~95% of the mass, usually persisting across
steps), adversarial ones are flatter and jumpier. That gives benign data
lower mean entropy and lower step-to-step divergence, so the full detection
pipeline can be exercised end-to-end with known ground truth.

Generation is single-threaded and draws from one seeded generator in a fixed
order, so a given config always reproduces byte-identical files.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DistriblockError
from .interchange import (
    DatasetManifest,
    DistributionSequence,
    ManifestEntry,
    save_manifest,
    save_sequence,
)


@dataclass
class SynthConfig:
    seed: int = 7
    n_per_class: int = 100
    t_min: int = 8
    t_max: int = 20
    vocab_size: int = 32
    benign_concentration: float = 0.95
    adv_concentration: float = 0.6
    benign_repeat_prob: float = 0.9
    adv_repeat_prob: float = 0.5

    def validate(self) -> "SynthConfig":
        if self.n_per_class < 1:
            raise DistriblockError("bad-synth-config", "n_per_class must be >= 1")
        if not (1 <= self.t_min <= self.t_max):
            raise DistriblockError("bad-synth-config", "need 1 <= t_min <= t_max")
        if self.vocab_size < 2:
            raise DistriblockError("bad-synth-config", "vocab_size must be >= 2")
        low = 1.0 / self.vocab_size
        for name, c in (
            ("benign_concentration", self.benign_concentration),
            ("adv_concentration", self.adv_concentration),
        ):
            if not (low < c <= 1.0):
                raise DistriblockError("bad-synth-config", f"{name} must lie in (1/V, 1]")
        for name, p in (
            ("benign_repeat_prob", self.benign_repeat_prob),
            ("adv_repeat_prob", self.adv_repeat_prob),
        ):
            if not (0.0 <= p <= 1.0):
                raise DistriblockError("bad-synth-config", f"{name} must lie in [0, 1]")
        return self


def _sample_sequence(
    rng: np.random.Generator, uid: str, t: int, v: int, concentration: float, repeat_prob: float
) -> DistributionSequence:
    steps = np.empty((t, v))
    dominant = int(rng.integers(v))
    for row in range(t):
        if row > 0 and rng.random() >= repeat_prob:
            dominant = int(rng.integers(v))
        mass = concentration * rng.uniform(0.95, 1.0)
        noise = rng.standard_normal(v - 1)
        rest = np.exp(noise - noise.max())
        rest /= rest.sum()
        steps[row, :] = 0.0
        others = np.concatenate([np.arange(dominant), np.arange(dominant + 1, v)])
        steps[row, others] = (1.0 - mass) * rest
        steps[row, dominant] = mass
    return DistributionSequence(uid, steps)


def generate_sequences(cfg: SynthConfig) -> tuple[list[DistributionSequence], list[str]]:
    """In-memory dataset: sequences plus per-utterance labels."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    sequences: list[DistributionSequence] = []
    labels: list[str] = []
    plans = (
        ("benign", cfg.benign_concentration, cfg.benign_repeat_prob),
        ("adversarial", cfg.adv_concentration, cfg.adv_repeat_prob),
    )
    for label, concentration, repeat_prob in plans:
        for i in range(cfg.n_per_class):
            t = int(rng.integers(cfg.t_min, cfg.t_max + 1))
            uid = f"{label}-{i:04d}"
            sequences.append(
                _sample_sequence(rng, uid, t, cfg.vocab_size, concentration, repeat_prob)
            )
            labels.append(label)
    return sequences, labels


def generate(cfg: SynthConfig, out_dir: str | Path) -> Path:
    """Write `.dbk` files plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    sequences, labels = generate_sequences(cfg)
    entries = []
    for seq, label in zip(sequences, labels):
        seq_path = out_dir / f"{seq.utterance_id}.dbk"
        save_sequence(seq, seq_path)
        entries.append(ManifestEntry(seq.utterance_id, label, seq_path=seq_path))
    manifest_path = out_dir / "manifest.csv"
    save_manifest(DatasetManifest(entries), manifest_path)
    return manifest_path
