import json

import numpy as np
import pytest

from efnet import bench, dbtc, verify
from efnet.cli import main
from efnet.data import read_pgm


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_verify_passes(capsys):
    code, out, _ = run(capsys, "verify", "--instances", "50", "--grad-seeds", "1")
    assert code == 0
    for name in ("clustering", "gradients", "windows", "decoder", "mif-symmetry"):
        assert f"[PASS] {name}" in out
    assert "max error" in out


def test_distance_sign_canary(monkeypatch):
    real = dbtc.dual_distance
    monkeypatch.setattr(dbtc, "dual_distance", lambda *a, **k: -real(*a, **k))
    res = verify.clustering_suite(instances=20)
    assert not res.ok and res.failed > 0


def test_verify_exit_code_on_failure(monkeypatch, capsys):
    real = dbtc.dual_distance
    monkeypatch.setattr(dbtc, "dual_distance", lambda *a, **k: -real(*a, **k))
    code, out, _ = run(capsys, "verify", "--instances", "10", "--grad-seeds", "1")
    assert code == 1 and "[FAIL] clustering" in out


def test_cluster_demo_deterministic(capsys):
    a = run(capsys, "cluster-demo", "--n", "64", "--tau", "0.3", "--k", "3", "--ratio", "0.25", "--seed", "2")
    b = run(capsys, "cluster-demo", "--n", "64", "--tau", "0.3", "--k", "3", "--ratio", "0.25", "--seed", "2")
    assert a == b and a[0] == 0
    assert "M=16" in a[1] and "oracle: agree" in a[1]


def test_gen_train_infer_eval(tmp_path, capsys):
    d = tmp_path / "data"
    assert run(capsys, "gen", "--out", str(d), "--n", "6", "--hw", "16", "--k", "3", "--seed", "1")[0] == 0
    cfg = tmp_path / "toy.cfg"
    cfg.write_text("channels = 8, 8, 8, 8\nheads = 1, 1, 1, 1\nnum_classes = 3\nresolution = 16\nwindow = 4\n"
                   "decoder = mlp\nsteps = 3\nbatch_size = 2\nlr = 0.001\nholdout = 0.34\n")
    ckpt = tmp_path / "m.efnt"
    code, out, _ = run(capsys, "train", "--config", str(cfg), "--data", str(d), "--out", str(ckpt))
    assert code == 0 and ckpt.exists() and "held-out (2)" in out
    pred = tmp_path / "pred.pgm"
    code, out, _ = run(capsys, "infer", "--ckpt", str(ckpt), "--rgb", str(d / "00000_rgb.ppm"),
                       "--thermal", str(d / "00000_thermal.pgm"), "--out", str(pred))
    assert code == 0
    labels = read_pgm(pred, raw=True)
    assert labels.shape == (16, 16) and labels.max() < 3
    code, out, _ = run(capsys, "eval", "--ckpt", str(ckpt), "--data", str(d))
    assert code == 0 and "mIoU" in out and "thermal-only" in out


def test_usage_and_format_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        main(["train"])
    assert e.value.code == 2
    bad = tmp_path / "bad.ppm"
    bad.write_bytes(b"P3 nope")
    code, _, err = run(capsys, "infer", "--ckpt", str(bad), "--rgb", str(bad), "--thermal", str(bad), "--out", "x.pgm")
    assert code == 2 and "offset" in err
    cfg = tmp_path / "c.cfg"
    cfg.write_text("colour = red\n")
    code, _, err = run(capsys, "train", "--config", str(cfg), "--data", str(tmp_path), "--out", "m")
    assert code == 2 and "colour" in err


def test_resolution_mismatch_is_usage_error(tmp_path, capsys):
    d = tmp_path / "data"
    run(capsys, "gen", "--out", str(d), "--n", "2", "--hw", "16")
    cfg = tmp_path / "c.cfg"
    cfg.write_text("resolution = 32\nsteps = 1\n")
    code, _, err = run(capsys, "train", "--config", str(cfg), "--data", str(d), "--out", str(tmp_path / "m"))
    assert code == 2 and "resolution" in err


def test_bench_cli(tmp_path, capsys):
    out_json = tmp_path / "b.json"
    code, out, _ = run(capsys, "bench", "--sizes", "64,256", "--tau", "0.7", "--k", "3", "--json", str(out_json))
    assert code == 0 and "tau=0.7 k=3 ratio=0.25" in out
    rows = json.loads(out_json.read_text())
    assert rows["config"] == {"tau": 0.7, "k": 3, "ratio": 0.25}
    assert {r["mode"] for r in rows["rows"]} == {"dbtc", "pool"}


def test_bench_counts_deterministic_and_scaling():
    a = bench.bench([256, 1024, 4096], timing=False)
    b = bench.bench([256, 1024, 4096], timing=False)
    assert [r.ops for r in a] == [r.ops for r in b]
    dbtc_ops = [r.ops for r in a if r.mode == "dbtc"]
    pool_ops = [r.ops for r in a if r.mode == "pool"]
    assert dbtc_ops[1] / dbtc_ops[0] > 8 and dbtc_ops[2] / dbtc_ops[1] > 8
    assert pool_ops[1] / pool_ops[0] == pytest.approx(4) and pool_ops[2] / pool_ops[1] == pytest.approx(4)


def test_bench_timing_monotone():
    rows = bench.bench([64, 256, 1024], channels=8)
    t = [r.seconds for r in rows if r.mode == "dbtc"]
    assert t[0] < t[1] < t[2]
    assert all(r.m == int(np.ceil(0.25 * r.n)) for r in rows if r.mode == "dbtc")
