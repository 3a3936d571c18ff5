import math

import numpy as np
import pytest

from distriblock.audio_metrics import (
    ErrorCounts,
    align,
    cer,
    db,
    db_x,
    noise_report,
    ser,
    snr_seg,
    tokenize,
    wer,
)
from distriblock.errors import DistriblockError
from distriblock.interchange import AudioSignal


# --- independent edit-distance oracle (no backtrace) ---------------------------

def oracle_distance(a, b):
    prev = list(range(len(b) + 1))
    for i, ai in enumerate(a, 1):
        cur = [i]
        for j, bj in enumerate(b, 1):
            cur.append(min(prev[j - 1] + (ai != bj), prev[j] + 1, cur[-1] + 1))
        prev = cur
    return prev[-1]


def random_tokens(rng, max_len=12, alphabet="abcde"):
    n = int(rng.integers(0, max_len + 1))
    return [alphabet[rng.integers(len(alphabet))] for _ in range(n)]


# --- WER -----------------------------------------------------------------------

def test_wer_identical():
    value, counts = wer("a b c", "a b c")
    assert value == 0.0
    assert (counts.S, counts.D, counts.I, counts.N) == (0, 0, 0, 3)


def test_wer_single_substitution():
    value, counts = wer("a b c", "a x c")
    assert value == pytest.approx(100.0 / 3.0)
    assert counts.S == 1 and counts.D == 0 and counts.I == 0


def test_wer_can_exceed_hundred():
    value, counts = wer("a", "a b c")
    assert value == 200.0
    assert counts.I == 2 and counts.S == 0 and counts.D == 0


def test_wer_tokenization_lowercases():
    value, _ = wer("Hello  World", "hello world")
    assert value == 0.0
    assert tokenize(" A  b\tC ") == ["a", "b", "c"]


def test_wer_tie_break_prefers_substitution():
    _, counts = wer("a b c", "x")
    assert (counts.S, counts.D, counts.I) == (1, 2, 0)


def test_wer_empty_reference_error():
    with pytest.raises(DistriblockError) as err:
        wer("   ", "a")
    assert err.value.code == "empty-reference"


def test_wer_matches_distance_oracle():
    rng = np.random.default_rng(61)
    for _ in range(500):
        ref = random_tokens(rng)
        hyp = random_tokens(rng)
        if not ref:
            continue
        value, counts = wer(ref, hyp)
        dist = oracle_distance(ref, hyp)
        assert counts.total == dist
        assert value == pytest.approx(100.0 * dist / len(ref))


def test_wer_levenshtein_symmetry():
    rng = np.random.default_rng(62)
    for _ in range(200):
        ref = random_tokens(rng)
        hyp = random_tokens(rng)
        if not ref or not hyp:
            continue
        wr, _ = wer(ref, hyp)
        wh, _ = wer(hyp, ref)
        assert wr * len(ref) == pytest.approx(wh * len(hyp))


def test_edit_distance_triangle_inequality():
    rng = np.random.default_rng(63)
    for _ in range(200):
        a, b, c = (random_tokens(rng, 8) for _ in range(3))
        ab = oracle_distance(a, b)
        bc = oracle_distance(b, c)
        ac = oracle_distance(a, c)
        assert ac <= ab + bc


# --- CER / SER --------------------------------------------------------------------

def test_cer_identical():
    value, _ = cer("same text", "same text")
    assert value == 0.0


def test_cer_one_of_three():
    value, counts = cer("abc", "abd")
    assert value == pytest.approx(100.0 / 3.0)
    assert counts.N == 3 and counts.S == 1


def test_cer_collapses_whitespace_runs():
    value, counts = cer("a   b", "a b")
    assert value == 0.0
    assert counts.N == 3  # 'a', ' ', 'b'


def test_cer_matches_oracle_on_corpus_pair():
    ref = "the quick brown fox jumps over the lazy dog"
    hyp = "the quick brown focks jump over the lazee dog"
    value, counts = cer(ref, hyp)
    dist = oracle_distance(" ".join(ref.split()), " ".join(hyp.split()))
    assert counts.total == dist
    assert value == pytest.approx(100.0 * dist / len(ref))


def test_ser_basic():
    assert ser([True, False]) == 50.0
    assert ser([False] * 10) == 0.0


def test_ser_count_oracle():
    rng = np.random.default_rng(64)
    flags = (rng.random(100) < 0.37).tolist()
    assert ser(flags) == pytest.approx(100.0 * sum(flags) / 100.0)


def test_ser_empty_error():
    with pytest.raises(DistriblockError):
        ser([])


# --- noise metrics ------------------------------------------------------------------

def sig(samples, rate=16000):
    return AudioSignal(np.asarray(samples, dtype=np.float64), rate)


def test_db_x_peak_ratio():
    x = sig(np.concatenate([np.zeros(10), [1000.0], np.zeros(10)]))
    d = sig(np.concatenate([np.zeros(10), [10.0], np.zeros(10)]))
    assert db_x(x, d) == pytest.approx(40.0, abs=1e-12)


def test_db_x_self_is_zero():
    x = sig(np.random.default_rng(65).standard_normal(512) * 100)
    assert db_x(x, x) == 0.0


def test_db_uses_absolute_value():
    assert db(sig([-1000.0, 500.0])) == pytest.approx(20 * math.log10(1000.0))


def test_db_x_random_fixture_matches_formula():
    rng = np.random.default_rng(66)
    x = sig(rng.standard_normal(2048) * 3000)
    d = sig(rng.standard_normal(2048) * 55)
    want = 20 * math.log10(np.abs(x.samples).max()) - 20 * math.log10(np.abs(d.samples).max())
    assert db_x(x, d) == pytest.approx(want, abs=1e-12)


def test_db_x_scaling_identity():
    rng = np.random.default_rng(67)
    x = sig(rng.standard_normal(1024) * 1000)
    d = sig(rng.standard_normal(1024) * 10)
    base = db_x(x, d)
    for c in (0.5, 2.0, 37.5):
        scaled = sig(c * d.samples)
        assert db_x(x, scaled) == pytest.approx(base - 20 * math.log10(c), abs=1e-9)


def test_db_x_errors():
    with pytest.raises(DistriblockError) as err:
        db_x(sig(np.ones(8)), sig(np.ones(4)))
    assert err.value.code == "length-mismatch"
    with pytest.raises(DistriblockError) as err:
        db_x(sig(np.ones(8)), sig(np.zeros(8)))
    assert err.value.code == "all-zero-signal"


def test_snr_seg_constant_ratio():
    x = sig(np.full(1024, 500.0))
    d = sig(np.full(1024, 50.0))
    assert snr_seg(x, d) == pytest.approx(20.0, abs=1e-12)


def test_snr_seg_self_is_zero():
    x = sig(np.random.default_rng(68).standard_normal(1024) * 200 + 1)
    assert snr_seg(x, x) == 0.0


def test_snr_seg_matches_per_frame_oracle():
    rng = np.random.default_rng(69)
    x = sig(rng.standard_normal(1000) * 900)
    d = sig(rng.standard_normal(1000) * 30)
    frame = 256
    m = 1000 // frame
    logs = []
    for i in range(m):
        ex = math.fsum(v * v for v in x.samples[i * frame : (i + 1) * frame])
        ed = math.fsum(v * v for v in d.samples[i * frame : (i + 1) * frame])
        logs.append(math.log10(ex / ed))
    want = 10.0 / m * math.fsum(logs)
    assert snr_seg(x, d, frame) == pytest.approx(want, abs=1e-10)


def test_snr_seg_excludes_zero_energy_frames():
    x_samples = np.concatenate([np.zeros(256), np.full(256, 100.0)])
    d_samples = np.concatenate([np.full(256, 10.0), np.full(256, 10.0)])
    report = noise_report(sig(x_samples), sig(d_samples), 256)
    assert report.frames_used == 1
    assert report.snr_seg == pytest.approx(20.0, abs=1e-12)


def test_snr_seg_scaling_identity():
    rng = np.random.default_rng(70)
    x = sig(rng.standard_normal(2048) * 800)
    d = sig(rng.standard_normal(2048) * 12)
    base = noise_report(x, d)
    for c in (0.25, 4.0):
        scaled = noise_report(x, sig(c * d.samples))
        assert scaled.snr_seg == pytest.approx(base.snr_seg - 20 * math.log10(c), abs=1e-9)
        assert scaled.frames_used == base.frames_used


def test_snr_seg_errors():
    with pytest.raises(DistriblockError) as err:
        snr_seg(sig(np.ones(100)), sig(np.ones(100)), 256)
    assert err.value.code == "length-mismatch"
    with pytest.raises(DistriblockError) as err:
        snr_seg(sig(np.ones(512)), sig(np.zeros(512)), 256)
    assert err.value.code == "no-usable-frame"


def test_error_counts_invariants():
    with pytest.raises(DistriblockError):
        ErrorCounts(S=3, D=3, I=0, N=5)
    counts = ErrorCounts(S=1, D=1, I=2, N=4)
    assert counts.total == 4


def test_align_accepts_generic_tokens():
    counts = align([1, 2, 3], [1, 9, 3])
    assert counts.S == 1
