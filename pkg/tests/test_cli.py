import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from binquant import cli
from binquant import modelpack as mp


def run(args, capsys):
    code = cli.main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def two_layer(tmp_path):
    rng = np.random.default_rng(42)
    path = tmp_path / "w.rtw"
    mp.write_raw(path, {
        "layer0.w": rng.standard_normal((32, 128)).astype(np.float32),
        "layer0.b": rng.standard_normal(32).astype(np.float32),
        "layer1.w": rng.standard_normal((16, 192)).astype(np.float32),
    })
    return path


def _mse_lines(out):
    rows = {}
    for line in out.splitlines()[1:]:
        parts = line.split()
        if len(parts) >= 4 and not line.startswith("wrote"):
            rows[parts[0]] = float(parts[-1])
    return rows


# -- quantize / verify --------------------------------------------------------------------

def test_quantize_absmean_block64_int8_verifies(tmp_path, two_layer, capsys):
    out_file = tmp_path / "m.bqw"
    code, out, _ = run(["quantize", "--in", two_layer, "--scheme", "absmean1", "--block", 64,
                        "--meta", "int8", "--out", out_file], capsys)
    assert code == 0
    assert "x vs float32" in out
    mse = _mse_lines(out)
    assert set(mse) == {"layer0.w", "layer0.b", "layer1.w"}
    assert mse["layer0.w"] > 0 and mse["layer0.b"] == 0
    code, out, _ = run(["verify", "--file", out_file], capsys)
    assert code == 0 and out.startswith("OK")
    manifest, tensors = mp.read_model(out_file)
    assert manifest.layers[1].scheme is None
    assert tensors["layer0.w"].scales.shape == (32 * 2,)
    assert tensors["layer0.w"].meta is not None


def test_reported_mse_uses_stored_metadata(tmp_path, two_layer, capsys):
    out_file = tmp_path / "m.bqw"
    _, out, _ = run(["quantize", "--in", two_layer, "--scheme", "e5", "--meta", "int8", "--out", out_file], capsys)
    raw = mp.read_raw(two_layer)
    _, tensors = mp.read_model(out_file)
    from binquant import quantcore as qc
    expect = np.mean((qc.dequantize(tensors["layer1.w"]) - raw["layer1.w"].astype(np.float64)) ** 2)
    assert _mse_lines(out)["layer1.w"] == pytest.approx(expect, rel=1e-5)


def test_constant_magnitude_fixture_has_zero_mse(tmp_path, capsys):
    rng = np.random.default_rng(0)
    w = (0.25 * rng.choice([-1.0, 1.0], (8, 64))).astype(np.float32)
    mp.write_raw(tmp_path / "c.rtw", {"w": w})
    code, out, _ = run(["quantize", "--in", tmp_path / "c.rtw", "--scheme", "e4", "--out", tmp_path / "c.bqw"], capsys)
    assert code == 0
    assert _mse_lines(out)["w"] == 0.0


def test_figure_fixture_four_scales(tmp_path, capsys):
    w = np.arange(12, dtype=np.float32).reshape(2, 6) - 5.5
    mp.write_raw(tmp_path / "f.rtw", {"w": w})
    code, _, _ = run(["quantize", "--in", tmp_path / "f.rtw", "--scheme", "absmean1", "--block", 3,
                      "--out", tmp_path / "f.bqw"], capsys)
    assert code == 0
    _, tensors = mp.read_model(tmp_path / "f.bqw")
    assert tensors["w"].scales.shape == (4,)
    assert tensors["w"].codes.shape == (4, 3)


def test_quantize_is_byte_identical(tmp_path, two_layer, capsys):
    outs = []
    for i in range(2):
        path = tmp_path / f"m{i}.bqw"
        code, stdout, _ = run(["quantize", "--in", two_layer, "--scheme", "e2", "--meta", "int8", "--out", path],
                              capsys)
        assert code == 0
        outs.append((path.read_bytes(), stdout.replace(str(path), "")))
    assert outs[0] == outs[1]


def test_verify_rejects_truncated_and_corrupted(tmp_path, two_layer, capsys):
    good = tmp_path / "m.bqw"
    run(["quantize", "--in", two_layer, "--scheme", "e4", "--out", good], capsys)
    data = good.read_bytes()
    (tmp_path / "t.bqw").write_bytes(data[: len(data) // 2])
    bad = bytearray(data)
    bad[-1] ^= 0xFF
    (tmp_path / "c.bqw").write_bytes(bytes(bad))
    for name in ("t.bqw", "c.bqw"):
        code, out, _ = run(["verify", "--file", tmp_path / name], capsys)
        assert code != 0
        assert out.startswith("FAIL") and len(out.strip().splitlines()) == 1


@pytest.mark.parametrize("args", [
    ["quantize", "--in", "missing.rtw", "--scheme", "e4", "--out", "x.bqw"],
    ["quantize", "--in", "{raw}", "--scheme", "nope", "--out", "x.bqw"],
    ["quantize", "--in", "{raw}", "--scheme", "e2", "--clip", "0", "--out", "x.bqw"],
    ["size-report", "--manifest", "missing.json"],
    ["bench", "--sizes", "4x4"],
    ["train", "--exp", "E9", "--steps", "1"],
])
def test_errors_give_one_line_and_nonzero(tmp_path, two_layer, capsys, monkeypatch, args):
    monkeypatch.chdir(tmp_path)
    args = [str(two_layer) if a == "{raw}" else a for a in args]
    code, out, err = run(args, capsys)
    assert code != 0
    assert len(err.strip().splitlines()) == 1 and "error" in err


def test_unknown_flag_rejected(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["verify", "--file", "x", "--bogus"])
    assert exc.value.code != 0


# -- size-report ------------------------------------------------------------------------------

def test_size_report_builtin_float(capsys):
    code, out, _ = run(["size-report", "--scheme", "e0", "--format", "csv"], capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    total = sum(int(r["total_bits"]) for r in rows)
    assert total == pytest.approx(28.6e9, abs=0.1e9)


def test_size_report_scheme_and_meta(capsys):
    code, out, _ = run(["size-report", "--scheme", "e5", "--meta", "int8"], capsys)
    assert code == 0
    assert "size reduction" in out


def test_size_report_single_layer_manifest(tmp_path, capsys):
    m = mp.ModelManifest([mp.LayerSpec("w", (64, 64), mp.parse_scheme("absmean1"))])
    mp.save_manifest(m, tmp_path / "m.json")
    code, out, _ = run(["size-report", "--manifest", tmp_path / "m.json", "--format", "csv"], capsys)
    assert code == 0
    assert out.splitlines()[1].endswith(",6144")


def test_config_file_supplies_defaults(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"scheme": "e4", "meta": "int8", "format": "csv"}))
    code, out, _ = run(["--config", tmp_path / "c.json", "size-report"], capsys)
    assert code == 0
    assert out.startswith("layer,params")
    (tmp_path / "bad.json").write_text(json.dumps({"nonsense": 1}))
    code, _, err = run(["--config", tmp_path / "bad.json", "size-report"], capsys)
    assert code != 0 and "nonsense" in err


# -- train / bench ------------------------------------------------------------------------------

def test_train_writes_results_csv(tmp_path, capsys):
    args = ["train", "--exp", "E0,E4", "--seed", 3, "--steps", 20, "--n-train", 512, "--n-eval", 128]
    code, _, _ = run(args + ["--out", tmp_path / "r.csv"], capsys)
    assert code == 0
    text = (tmp_path / "r.csv").read_text()
    assert text.splitlines()[0] == "exp_id,seed,steps,final_loss,eval_acc,diverged,total_bits,reduction"
    assert [r["exp_id"] for r in csv.DictReader(io.StringIO(text))] == ["E0", "E4"]
    run(args + ["--out", tmp_path / "r2.csv"], capsys)
    assert (tmp_path / "r2.csv").read_text() == text


def test_train_export(tmp_path, capsys):
    code, _, _ = run(["train", "--exp", "E5", "--seed", 1, "--steps", 10, "--n-train", 256, "--n-eval", 64,
                      "--export", tmp_path / "m.bqw"], capsys)
    assert code == 0
    ok, _ = mp.verify_model(tmp_path / "m.bqw")
    assert ok


def test_bench_csv(tmp_path, capsys):
    code, _, _ = run(["bench", "--sizes", "2x64x8,3x128x4", "--reps", 1, "--schemes", "e4,e5",
                      "--out", tmp_path / "b.csv"], capsys)
    assert code == 0
    rows = list(csv.DictReader(io.StringIO((tmp_path / "b.csv").read_text())))
    assert len(rows) == 4 and {r["scheme"] for r in rows} == {"e4", "e5"}


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "binquant", "size-report", "--scheme", "e1", "--max-layers", "2"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0, res.stderr
    assert "more layers" in res.stdout
