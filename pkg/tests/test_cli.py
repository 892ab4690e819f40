import csv
import math

import numpy as np
import pytest

from npacodec import synthetic
from npacodec.cli import main
from npacodec.metrics import RdPoint, write_rd_csv
from npacodec.nn.weights import ModelConfig, ModelWeights
from npacodec.pcio import read_ply, write_ply


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def kv(text):
    return dict(line.split("=", 1) for line in text.splitlines() if "=" in line)


@pytest.fixture(scope="module")
def weights_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("w") / "model.npaw"
    ModelWeights.random(ModelConfig(), seed=1, dtype=np.float32).save(path)
    return path


@pytest.fixture(scope="module")
def cloud_file(tmp_path_factory):
    c = synthetic.random_cloud(np.random.default_rng(21), 6000, extent=1 << 12)
    path = tmp_path_factory.mktemp("c") / "cloud.ply"
    # millimetre precision: stored in metres, quantized back by --precision 0.001
    write_ply(c * 0.001, path, binary=True)
    return path, c


def test_encode_decode_round_trip(capsys, tmp_path, weights_file, cloud_file):
    src, coords = cloud_file
    code, out, _ = run(capsys, "encode", "--input", src, "--weights", weights_file,
                       "--precision", 0.001, "--out", tmp_path / "c.npcc")
    assert code == 0
    vals = kv(out)
    n_bytes = (tmp_path / "c.npcc").stat().st_size
    assert int(vals["points"]) == len(coords)
    assert int(vals["bytes"]) == n_bytes
    assert float(vals["bpp"]) == pytest.approx(8 * n_bytes / len(coords), abs=1e-6)

    code, out, _ = run(capsys, "decode", "--input", tmp_path / "c.npcc", "--weights", weights_file,
                       "--out", tmp_path / "rec.ply")
    assert code == 0
    rec = read_ply(tmp_path / "rec.ply").points
    got = np.unique(rec.astype(np.int64), axis=0)
    assert np.array_equal(got, np.unique(coords, axis=0))


def test_encode_without_weights_warns(capsys, tmp_path, cloud_file):
    src, _ = cloud_file
    code, _, err = run(capsys, "encode", "--input", src, "--precision", 0.001,
                       "--scale", "1/4", "--out", tmp_path / "s.npcc")
    assert code == 0
    assert "warning" in err


def test_eval_identical(capsys, cloud_file):
    src, _ = cloud_file
    code, out, _ = run(capsys, "eval", "--ref", src, "--rec", src, "--peak", 1)
    assert code == 0
    assert kv(out) == {"d1_psnr": "inf", "d2_psnr": "inf"}


def test_bdrate_identical(capsys, tmp_path):
    pts = [RdPoint(0.5 * 2**i, 30 + 3 * i, 32 + 3 * i) for i in range(5)]
    write_rd_csv(pts, tmp_path / "a.csv")
    code, out, _ = run(capsys, "bdrate", "--anchor", tmp_path / "a.csv", "--test", tmp_path / "a.csv")
    assert code == 0
    assert out.strip() == "bd_rate=0.00%"


def test_rd_sweep_rates_increase(capsys, tmp_path, weights_file, cloud_file):
    src, _ = cloud_file
    prefix = tmp_path / "sweep"
    code, out, _ = run(capsys, "rd-sweep", "--input", src, "--weights", weights_file,
                       "--precision", 0.001, "--scales", "1/8,1/4,1/2,1", "--out", prefix)
    assert code == 0
    with open(prefix.with_suffix(".csv")) as f:
        rows = list(csv.DictReader(f))
    assert [r["scale"] for r in rows] == ["1/8", "1/4", "1/2", "1"]
    bpp = [float(r["bpp"]) for r in rows]
    assert all(a < b for a, b in zip(bpp, bpp[1:]))
    assert math.isinf(float(rows[-1]["d1_psnr"]))
    assert prefix.with_suffix(".svg").read_text().startswith("<?xml")


def test_train_toy(capsys, tmp_path):
    cfg = tmp_path / "toy.cfg"
    cfg.write_text("steps = 2\nbatch = 1\ncorpus_size = 2\nresolution = 10\nmax_level = 1\nk = 4\n")
    code, out, _ = run(capsys, "train-toy", "--config", cfg, "--out", tmp_path / "toy.npaw")
    assert code == 0
    vals = kv(out)
    assert vals["steps"] == "2"
    w = ModelWeights.load(tmp_path / "toy.npaw")
    assert w.hash.hex() == vals["model_hash"]
    assert (tmp_path / "toy.log.csv").read_text().startswith("step,loss")


def test_gradcheck_layers(capsys):
    code, out, _ = run(capsys, "gradcheck", "--layers-only")
    assert code == 0
    assert out.count("PASS") == 10 and "FAIL" not in out


def test_usage_error_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["encode", "--input", "x.ply"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["encode", "--input", "x.ply", "--out", "y", "--scale", "3/2"])
    assert exc.value.code == 2


def test_data_errors_exit_1(capsys, tmp_path, weights_file):
    code, _, err = run(capsys, "encode", "--input", tmp_path / "missing.ply", "--out", tmp_path / "o")
    assert code == 1 and "error" in err
    bad = tmp_path / "bad.npcc"
    bad.write_bytes(b"not a stream")
    code, _, err = run(capsys, "decode", "--input", bad, "--weights", weights_file, "--out", tmp_path / "r.ply")
    assert code == 1 and "MalformedHeader" in err


def test_module_entry_point(tmp_path):
    import subprocess
    import sys

    r = subprocess.run([sys.executable, "-m", "npacodec", "bdrate"], capture_output=True, text=True)
    assert r.returncode == 2
    assert "usage" in r.stderr
