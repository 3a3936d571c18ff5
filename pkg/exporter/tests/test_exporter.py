import struct

import numpy as np
import pytest

from dbk_exporter.cli import main
from dbk_exporter.convert import DumpSpec, ExportError, export, read_dump, to_probabilities

# the detection pipeline is the consumer; its loader is the round-trip oracle
from distriblock.interchange import load_manifest, load_sequence


def write_raw(path, values):
    values = np.asarray(values, dtype=np.float64)
    rows, cols = values.shape
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(
        b"RAW1" + struct.pack("<II", rows, cols) + values.astype("<f4").tobytes()
    )


def random_probs(rng, rows, cols):
    x = rng.random((rows, cols)) ** 3 + 1e-6
    return x / x.sum(axis=1, keepdims=True)


def test_twenty_dump_round_trip(tmp_path):
    rng = np.random.default_rng(201)
    in_dir, out_dir = tmp_path / "dumps", tmp_path / "out"
    expected = {}
    for i in range(10):  # linear probability dumps
        probs = random_probs(rng, int(rng.integers(1, 9)), 32)
        uid = f"lin{i:02d}"
        write_raw(in_dir / "benign" / f"{uid}.raw", probs)
        expected[uid] = ("benign", probs)
    for i in range(10):  # natural-log dumps
        probs = random_probs(rng, int(rng.integers(1, 9)), 32)
        uid = f"log{i:02d}"
        write_raw(in_dir / "adversarial" / f"{uid}.raw", np.log(probs))
        expected[uid] = ("adversarial", probs)

    report = export(DumpSpec(in_dir, out_dir))
    assert report.ok
    assert len(report.exported) == 20

    manifest = load_manifest(out_dir / "manifest.csv")
    assert len(manifest.entries) == 20
    for entry in manifest.entries:
        label, probs = expected[entry.utterance_id]
        assert entry.label == label
        seq = load_sequence(entry.seq_path)
        # float32 storage plus exp/renormalization; float32 eps is ~1.2e-7
        f32 = np.float64(np.finfo(np.float32).eps)
        assert np.abs(seq.steps - probs).max() <= 4 * f32


def test_log_detection_by_sign(tmp_path):
    rng = np.random.default_rng(202)
    probs = random_probs(rng, 5, 32)
    out = to_probabilities(np.log(probs).astype(np.float32).astype(np.float64))
    assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-12
    assert np.abs(out - probs).max() < 1e-5


def test_linear_dump_kept_linear():
    probs = np.array([[0.5, 0.25, 0.25]])
    out = to_probabilities(probs.copy())
    assert np.allclose(out, probs)


def test_ambiguous_all_zero_rows_rejected():
    with pytest.raises(ExportError) as err:
        to_probabilities(np.zeros((3, 4)))
    assert err.value.code == "ambiguous-zero-row"


def test_row_sum_violation_rejected():
    with pytest.raises(ExportError) as err:
        to_probabilities(np.array([[0.5, 0.3]]))
    assert err.value.code == "row-sum-violation"


def test_non_finite_rejected():
    with pytest.raises(ExportError) as err:
        to_probabilities(np.array([[np.nan, 1.0]]))
    assert err.value.code == "non-finite-entry"


def test_read_dump_errors(tmp_path):
    bad_magic = tmp_path / "a.raw"
    bad_magic.write_bytes(b"WHAT" + b"\x00" * 16)
    with pytest.raises(ExportError) as err:
        read_dump(bad_magic)
    assert err.value.code == "bad-magic"

    short = tmp_path / "b.raw"
    short.write_bytes(b"RAW1" + struct.pack("<II", 2, 4) + b"\x00" * 8)
    with pytest.raises(ExportError) as err:
        read_dump(short)
    assert err.value.code == "truncated"

    bad_shape = tmp_path / "c.raw"
    bad_shape.write_bytes(b"RAW1" + struct.pack("<II", 1, 1) + b"\x00" * 4)
    with pytest.raises(ExportError) as err:
        read_dump(bad_shape)
    assert err.value.code == "bad-shape"


def test_corrupted_file_among_ten_continues(tmp_path, capsys):
    rng = np.random.default_rng(203)
    in_dir, out_dir = tmp_path / "dumps", tmp_path / "out"
    for i in range(9):
        write_raw(in_dir / "benign" / f"ok{i}.raw", random_probs(rng, 4, 8))
    corrupt = in_dir / "benign" / "broken.raw"
    corrupt.write_bytes(b"RAW1" + struct.pack("<II", 3, 8) + b"\xff" * 11)

    code = main(["--in", str(in_dir), "--out", str(out_dir)])
    captured = capsys.readouterr()
    assert code == 1
    assert "broken.raw" in captured.err
    assert "code=truncated" in captured.err
    assert len(list(out_dir.glob("*.dbk"))) == 9
    manifest = load_manifest(out_dir / "manifest.csv")
    assert len(manifest.entries) == 9
    assert all(e.utterance_id.startswith("ok") for e in manifest.entries)


def test_cli_round_trip(tmp_path, capsys):
    rng = np.random.default_rng(204)
    in_dir, out_dir = tmp_path / "dumps", tmp_path / "out"
    write_raw(in_dir / "benign" / "u0.raw", random_probs(rng, 5, 32))
    code = main(["--in", str(in_dir), "--out", str(out_dir)])
    assert code == 0
    assert capsys.readouterr().out.strip() == "exported 1 file(s), 0 failure(s)"
    assert load_sequence(out_dir / "u0.dbk").vocab_size == 32


def test_cli_missing_input(tmp_path, capsys):
    code = main(["--in", str(tmp_path / "nope"), "--out", str(tmp_path / "out")])
    assert code == 1
    assert "missing-input" in capsys.readouterr().err


def test_cli_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["--in", "x"])  # --out missing
    assert exc.value.code == 2
