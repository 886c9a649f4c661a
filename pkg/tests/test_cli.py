import json

import numpy as np
import pytest

from spikenerf.cli import RANDOM_BOUND_HEADER, bound_check_random, bound_trial, main
from spikenerf.fileio import read_csv, read_pfm, read_ply
from spikenerf.renderer import BOUND_CSV_HEADER, bound_report
from spikenerf.training import load_checkpoint

TINY_FIELD = {"pos_freqs": 2, "dir_freqs": 1, "hidden_width": 8, "depth_layers": 1}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-scene", "--scene", "sphere", "--views", "2", "--res", "6x5", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    cfg = out / "cfg.json"
    cfg.write_text(json.dumps({"train": {"iterations": 0, "log_every": 0}, "field": TINY_FIELD}))
    assert main(["train", "--data", str(dataset / "manifest.json"), "--config", str(cfg), "--out", str(out)]) == 0
    return out / "final.snrf"


# -------------------------------------------------------------- exit codes


def test_usage_errors_exit_1(capsys):
    assert main([]) == 1
    assert main(["gen-scene", "--out", "x"]) == 1               # missing --scene
    assert main(["render", "--ckpt", "a", "--camera", "b", "--out", "c", "--bogus"]) == 1
    assert main(["gen-scene", "--scene", "sphere", "--out", "x", "--res", "64"]) == 1
    assert "error" in capsys.readouterr().err


def test_runtime_errors_exit_2(tmp_path, capsys):
    assert main(["render", "--ckpt", str(tmp_path / "missing.snrf"), "--camera", "c.json",
                 "--out", str(tmp_path)]) == 2
    assert "render" in capsys.readouterr().err


def test_bound_check_needs_a_mode(tmp_path):
    assert main(["bound-check", "--out", str(tmp_path / "b.csv")]) == 1


def test_help_exits_cleanly():
    with pytest.raises(SystemExit) as ei:
        main(["train", "--help"])
    assert ei.value.code == 0


# ----------------------------------------------------------------- commands


def test_gen_scene_bookkeeping(dataset, capsys):
    names = sorted(p.name for p in dataset.iterdir())
    assert names == ["depth_000.pfm", "depth_001.pfm", "gen-scene.config.json", "manifest.json",
                     "rgb_000.ppm", "rgb_001.ppm", "scene.json"]
    sidecar = json.loads((dataset / "gen-scene.config.json").read_text())
    assert sidecar["views"] == 2 and sidecar["res"] == "6x5" and sidecar["seed"] == 0
    assert read_pfm(dataset / "depth_000.pfm").shape == (5, 6)


def test_gen_scene_is_idempotent(tmp_path):
    for _ in range(2):
        assert main(["gen-scene", "--scene", "box", "--views", "1", "--res", "4x4", "--out", str(tmp_path)]) == 0
        snap = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    assert snap == {p.name: p.read_bytes() for p in tmp_path.iterdir()}


def test_train_zero_iterations_writes_init(checkpoint, capsys):
    ck = load_checkpoint(checkpoint)
    assert ck.iteration == 0
    sidecar = json.loads((checkpoint.parent / "train.config.json").read_text())
    assert sidecar["train"]["iterations"] == 0 and sidecar["field"]["hidden_width"] == 8
    assert sidecar["train"]["lr"] == 5e-4            # defaults are resolved into the sidecar


def test_sidecar_reruns_train_identically(checkpoint, dataset, tmp_path):
    sidecar = json.loads((checkpoint.parent / "train.config.json").read_text())
    cfg = tmp_path / "again.json"
    cfg.write_text(json.dumps({"train": sidecar["train"], "field": sidecar["field"]}))
    assert main(["train", "--data", sidecar["data"], "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "final.snrf").read_bytes() == checkpoint.read_bytes()


def test_render_outputs(checkpoint, dataset, tmp_path):
    assert main(["render", "--ckpt", str(checkpoint), "--camera", str(dataset / "manifest.json"),
                 "--out", str(tmp_path), "--samples", "8"]) == 0
    for name in ("rgb_000.ppm", "depth_001.pfm", "depth_int_000.pfm", "bounds_000.csv", "render.config.json"):
        assert (tmp_path / name).exists()
    head, rows = read_csv(tmp_path / "bounds_000.csv")
    assert ",".join(head) == BOUND_CSV_HEADER and len(rows) == 30


def test_eval_outputs(checkpoint, dataset, tmp_path, capsys):
    assert main(["eval", "--ckpt", str(checkpoint), "--data", str(dataset / "manifest.json"),
                 "--out", str(tmp_path), "--samples", "8"]) == 0
    head, rows = read_csv(tmp_path / "depth_errors.csv")
    assert head[0] == "view" and len(rows) == 2
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert set(summary) == {"mean_depth_error", "tau", "chamfer", "points"}


def test_eval_baseline_needs_threshold(checkpoint, dataset, tmp_path):
    args = ["eval", "--ckpt", str(checkpoint), "--data", str(dataset / "manifest.json"), "--out", str(tmp_path),
            "--baseline", "relu", "--samples", "8"]
    assert main(args) == 1
    assert main(args + ["--sweep", "0.1:2:5"]) == 0
    head, rows = read_csv(tmp_path / "sweep.csv")
    assert head == ["tau", "view_0", "view_1"] and len(rows) == 5


def test_export_ply(checkpoint, dataset, tmp_path):
    assert main(["export", "--ckpt", str(checkpoint), "--views", str(dataset / "manifest.json"),
                 "--ply", str(tmp_path / "c.ply"), "--samples", "8"]) == 0
    assert read_ply(tmp_path / "c.ply").shape[1] == 3
    assert (tmp_path / "c.ply.config.json").exists()


def test_bound_check_on_checkpoint(checkpoint, dataset, tmp_path):
    out = tmp_path / "b.csv"
    assert main(["bound-check", "--ckpt", str(checkpoint), "--data", str(dataset / "manifest.json"),
                 "--out", str(out), "--samples", "8"]) == 0
    head, rows = read_csv(out)
    assert ",".join(head) == BOUND_CSV_HEADER and len(rows) == 60


# ------------------------------------------------------------ bound oracle


def test_random_bound_check_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    assert main(["bound-check", "--random", "200", "--seed", "3", "--out", str(a)]) == 0
    assert main(["bound-check", "--random", "200", "--seed", "3", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    head, rows = read_csv(a)
    assert ",".join(head) == RANDOM_BOUND_HEADER and len(rows) == 200
    assert sum(int(r[-1]) for r in rows) == 0
    assert "200 trials, 0 violations" in capsys.readouterr().out


def test_trials_respect_the_sampling_contract():
    rng = np.random.default_rng(0)
    for _ in range(300):
        batch, v_th = bound_trial(rng)
        n = len(batch.t)
        assert 16 <= n <= 256 and 0.5 <= v_th <= 50
        m = int(np.flatnonzero(batch.sigma > 0)[0])
        assert batch.sigma[m] == v_th and m < n - 1
        assert abs(batch.far - batch.dt.sum()) < 1e-12


def test_all_zero_successors_still_bounded():
    rng = np.random.default_rng(5)
    seen = 0
    for _ in range(2000):
        batch, v_th = bound_trial(rng)
        m = int(np.flatnonzero(batch.sigma > 0)[0])
        if np.all(batch.sigma[m + 1:] == 0):
            seen += 1
            r = bound_report(batch, v_th)
            assert r.v_max == 0.0 and r.holds
    assert seen > 0


def test_random_rows_match_reports():
    rows = bound_check_random(5, 11)
    rng = np.random.default_rng(11)
    for row in rows:
        batch, v_th = bound_trial(rng)
        r = bound_report(batch, v_th)
        assert row[2:] == (r.m, r.v_th, r.v_max, r.t_range, r.d_integrated, r.d_extracted, r.lower, r.upper, 0)
