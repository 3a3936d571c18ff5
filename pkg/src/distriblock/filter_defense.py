"""Noise-filtering defense: FIR low-pass, spectral gating, transcript diff.

The low-pass filter is a linear-phase windowed-sinc (Hamming window, odd tap
count, unity DC gain). Group delay is compensated so output length equals
input length. With the default 101 taps at 16 kHz the transition band is a
few hundred Hz wide and stopband rejection exceeds 50 dB, comfortably inside
the +/-1 dB passband / 40 dB stopband targets.

Spectral gating estimates, for every frequency band, a noise threshold
(mean + n_std * std of the band's log-magnitude over time), capped at the
clip-wide threshold so a band dominated by stationary signal cannot mask
itself. Cells above their threshold keep gain 1; the rest drop to a -30 dB
floor. The binary gain map is smoothed with a small box kernel before being
applied, and the clip is reconstructed by weighted overlap-add, so masks can
only attenuate.

The transcript-difference classifier turns the filter into a detector: it
compares an utterance's transcript before and after filtering (WER or CER,
pre-filter transcript as reference) and applies a Gaussian threshold
classifier fit on benign pairs. Producing the transcripts is the caller's
job; this module only scores and classifies the pairs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audio_metrics import cer, wer
from .classifiers import GaussianModel, classify_gaussian, fit_gaussian
from .errors import DistriblockError
from .interchange import AudioSignal

GATE_FLOOR_DB = -30.0


@dataclass
class FilterConfig:
    lpf_cutoff_hz: float = 7000.0
    fir_taps: int = 101
    stft_win: int = 512
    stft_hop: int = 128
    gate_n_std: float = 1.5
    mask_smooth_freq: int = 3
    mask_smooth_time: int = 5

    def validate(self, sample_rate: int | None = None) -> "FilterConfig":
        if self.fir_taps < 3 or self.fir_taps % 2 == 0:
            raise DistriblockError("bad-filter-config", "fir_taps must be an odd integer >= 3")
        if self.lpf_cutoff_hz <= 0:
            raise DistriblockError("bad-filter-config", "cutoff must be positive")
        if sample_rate is not None and self.lpf_cutoff_hz >= sample_rate / 2:
            raise DistriblockError(
                "cutoff-above-nyquist",
                f"cutoff {self.lpf_cutoff_hz} Hz >= Nyquist {sample_rate / 2} Hz",
            )
        if self.stft_win < 4 or self.stft_hop < 1 or self.stft_hop > self.stft_win:
            raise DistriblockError("bad-filter-config", "need 1 <= stft_hop <= stft_win")
        if self.mask_smooth_freq < 1 or self.mask_smooth_time < 1:
            raise DistriblockError("bad-filter-config", "smoothing extents must be >= 1")
        if self.gate_n_std < 0:
            raise DistriblockError("bad-filter-config", "gate_n_std must be >= 0")
        return self


@dataclass
class TranscriptDiffModel:
    metric: str  # "wer" or "cer"
    gaussian: GaussianModel

    def validate(self) -> "TranscriptDiffModel":
        if self.metric not in ("wer", "cer"):
            raise DistriblockError("bad-model", f"unknown transcript metric {self.metric!r}")
        self.gaussian.validate()
        return self


def design_lowpass(cutoff_hz: float, taps: int, sample_rate: int) -> np.ndarray:
    """Hamming-windowed sinc kernel, normalized to unity DC gain."""
    fc = cutoff_hz / sample_rate
    n = np.arange(taps) - (taps - 1) / 2.0
    kernel = 2.0 * fc * np.sinc(2.0 * fc * n) * np.hamming(taps)
    return kernel / kernel.sum()


def lowpass(signal: AudioSignal, cfg: FilterConfig | None = None) -> AudioSignal:
    """Zero-phase-compensated FIR low-pass; preserves length and sample rate."""
    cfg = (cfg or FilterConfig()).validate(signal.sample_rate)
    kernel = design_lowpass(cfg.lpf_cutoff_hz, cfg.fir_taps, signal.sample_rate)
    delay = (cfg.fir_taps - 1) // 2
    full = np.convolve(signal.samples, kernel)
    return AudioSignal(full[delay : delay + signal.samples.size], signal.sample_rate)


def _frame(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    return sliding_window_view(x, win)[::hop]


def spectral_gate(signal: AudioSignal, cfg: FilterConfig | None = None) -> AudioSignal:
    """Suppress time-frequency cells below per-band noise thresholds."""
    cfg = (cfg or FilterConfig()).validate()
    x = signal.samples
    win, hop = cfg.stft_win, cfg.stft_hop
    if x.size < win:
        raise DistriblockError("signal-too-short", f"need at least {win} samples, got {x.size}")

    window = np.hanning(win)
    pad = win
    xp = np.concatenate([np.zeros(pad), x, np.zeros(pad + win)])
    frames = _frame(xp, win, hop) * window
    spec = np.fft.rfft(frames, axis=1)
    logmag = 20.0 * np.log10(np.abs(spec) + 1e-12)

    # Threshold statistics come from frames centered inside the original clip;
    # the zero padding added for clean overlap-add must not skew them.
    centers = np.arange(frames.shape[0]) * hop + win / 2.0
    inside = (centers >= pad) & (centers < pad + x.size)
    ref = logmag[inside]
    per_band = ref.mean(axis=0) + cfg.gate_n_std * ref.std(axis=0)
    clip_wide = ref.mean() + cfg.gate_n_std * ref.std()
    threshold = np.minimum(per_band, clip_wide)

    floor = 10.0 ** (GATE_FLOOR_DB / 20.0)
    mask = np.where(logmag > threshold[None, :], 1.0, floor)
    kt, kf = cfg.mask_smooth_time, cfg.mask_smooth_freq
    padded = np.pad(mask, ((kt // 2, kt - 1 - kt // 2), (kf // 2, kf - 1 - kf // 2)), mode="edge")
    mask = sliding_window_view(padded, (kt, kf)).mean(axis=(2, 3))

    rebuilt = np.fft.irfft(spec * mask, n=win, axis=1) * window
    out = np.zeros(xp.size)
    norm = np.zeros(xp.size)
    wsq = window * window
    for i in range(rebuilt.shape[0]):
        start = i * hop
        out[start : start + win] += rebuilt[i]
        norm[start : start + win] += wsq
    out /= np.maximum(norm, 1e-12)
    return AudioSignal(out[pad : pad + x.size], signal.sample_rate)


def transcript_diff_value(metric: str, pre: str, post: str) -> float:
    """WER or CER of the post-filter transcript against the pre-filter one."""
    if metric == "wer":
        value, _ = wer(pre, post)
    elif metric == "cer":
        value, _ = cer(pre, post)
    else:
        raise DistriblockError("bad-model", f"unknown transcript metric {metric!r}")
    return value


def fit_transcript_diff(
    benign_pairs: list[tuple[str, str]], metric: str = "wer", fpr_budget: float = 0.01
) -> TranscriptDiffModel:
    """Fit the Gaussian on benign pre/post metric values."""
    if len(benign_pairs) < 2:
        raise DistriblockError("too-few-scores", "need at least 2 benign transcript pairs")
    values = [transcript_diff_value(metric, pre, post) for pre, post in benign_pairs]
    model = fit_gaussian(values, ("transcript", metric), fpr_budget)
    return TranscriptDiffModel(metric, model).validate()


def classify_transcript_diff(
    model: TranscriptDiffModel, pre: str, post: str
) -> tuple[str, float]:
    """Verdict for one transcript pair, plus the metric value used."""
    model.validate()
    value = transcript_diff_value(model.metric, pre, post)
    verdict, _ = classify_gaussian(model.gaussian, value)
    return verdict, value
