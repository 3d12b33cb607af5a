"""
實驗流程與命令列測試（小網格）
"""

import json

import numpy as np
import pandas as pd
import pytest

from bench_cli import main, run_scenario, scaling_study, sweep_e1
from config import load_run_config
from hermite import NonFiniteError
from ledger import get_ledger


def shear_velocity(x, t):
    """邊界上為零的旋轉剪切場"""
    u = -np.sin(np.pi * x[:, 0]) ** 2 * np.sin(2 * np.pi * x[:, 1])
    v = np.sin(np.pi * x[:, 1]) ** 2 * np.sin(2 * np.pi * x[:, 0])
    return np.cos(np.pi * t) * np.stack([u, v], axis=-1)


def nan_velocity(x, t):
    return np.full(x.shape, np.nan)


CM_SMALL = ["nc=8", "nf_init=16", "nf_min=16", "nf_max=32", "resolution=64"]


def small_cfg(tmp_path, *overrides, method="cm"):
    common = [f"output_dir={tmp_path}", "final_time=0.5", f"method={method}"]
    grid = CM_SMALL if method == "cm" else ["ng=16", "resolution=64"]
    return load_run_config(None, common + grid + list(overrides))


def test_zero_time_run_reproduces_initial_set(tmp_path):
    summary = run_scenario(small_cfg(tmp_path, "final_time=0"))
    assert summary["steps"] == 0 and summary["remaps"] == 0
    assert summary["metrics"][0]["l2"] == 0.0
    assert summary["tau_history"] == []


def test_cm_run_writes_artifacts(tmp_path):
    cfg = small_cfg(tmp_path, "snapshot_times=0.25")
    summary = run_scenario(cfg)
    run_dir = cfg.run_dir()

    for name in ("config.env", "summary.json", "metrics.csv", "timing.csv", "history.csv", "ledger.db"):
        assert (run_dir / name).exists(), name
    snapshots = sorted(p.name for p in (run_dir / "snapshots").iterdir())
    assert "circle_t000.2500.txt" in snapshots
    assert len([s for s in snapshots if s.endswith(".pgm")]) == 3

    assert summary["steps"] == 4
    assert summary["trigger_violations"] == 0
    assert len(summary["tau_history"]) == summary["remaps"]
    assert summary["nf_max_reached"] >= max(16, summary["nf_final"])
    history = pd.read_csv(run_dir / "history.csv")
    assert len(history) == summary["steps"]
    assert json.loads((run_dir / "summary.json").read_text(encoding="utf-8"))["steps"] == 4

    timing = pd.read_csv(run_dir / "timing.csv")
    phases = timing.loc[0, ["footpoints", "interpolation", "particles", "remapping"]].sum()
    assert phases <= timing.loc[0, "total"] + 1e-12

    runs = get_ledger(run_dir).get_runs()
    assert runs[-1]["status"] == "finished"


def test_gals_run(tmp_path):
    cfg = small_cfg(tmp_path, method="gals")
    summary = run_scenario(cfg)
    assert summary["method"] == "gals"
    assert summary["steps"] == 8
    assert summary["remaps"] == 0
    assert summary["metrics"][0]["hausdorff"] is not None
    assert 'e1="' not in (cfg.run_dir() / "config.env").read_text(encoding="utf-8")


def test_custom_velocity_run(tmp_path):
    cfg = small_cfg(tmp_path, "scenario=custom", "velocity=test_bench_cli:shear_velocity", "set_center=0.5,0.7")
    summary = run_scenario(cfg)
    assert summary["scenario"] == "custom"
    assert summary["steps"] == 4


def test_tracers_written(tmp_path):
    cfg = small_cfg(tmp_path, "tracer_points=0.5 0.75 0.25 0.5", "final_time=0.25")
    summary = run_scenario(cfg)
    frame = pd.read_csv(cfg.run_dir() / "tracers.csv")
    assert len(frame) == 2
    assert summary["tracer_max_return"] == pytest.approx(frame["distance"].max())


def test_nan_velocity_marks_run_failed(tmp_path):
    cfg = small_cfg(tmp_path, "scenario=custom", "velocity=test_bench_cli:nan_velocity", "set_center=0.5,0.5")
    with pytest.raises(NonFiniteError) as info:
        run_scenario(cfg)
    assert info.value.step == 1
    run = get_ledger(cfg.run_dir()).get_runs()[-1]
    assert run["status"] == "failed"
    assert run["error"].startswith("step 1")


def test_resume_from_checkpoint(tmp_path):
    direct = run_scenario(small_cfg(tmp_path, "checkpoint_every=2", "label=direct"))
    checkpoint = tmp_path / "direct" / "checkpoints" / "step_000002"
    assert (checkpoint / "manifest.txt").exists()
    resumed = run_scenario(small_cfg(tmp_path, "label=resumed"), resume=checkpoint)
    assert resumed["steps"] == direct["steps"]
    assert resumed["remaps"] == direct["remaps"]
    assert resumed["metrics"][0]["l2"] == pytest.approx(direct["metrics"][0]["l2"], abs=1e-12)


def test_identical_config_gives_identical_results(tmp_path):
    first = small_cfg(tmp_path, "label=first")
    second = small_cfg(tmp_path, "label=second")
    run_scenario(first)
    run_scenario(second)
    for name in ("metrics.csv", "history.csv"):
        assert (first.run_dir() / name).read_bytes() == (second.run_dir() / name).read_bytes(), name


def test_remap_cost_follows_grid_ratio(tmp_path):
    # e1 極小，每步都 remap
    summary = run_scenario(small_cfg(tmp_path, "e1=1e-14"))
    timing = summary["timing"]
    assert timing["remaps"] == timing["steps"] == 4
    per_step = (timing["footpoints"] + timing["interpolation"]) / timing["steps"]
    per_remap = timing["remapping"] / timing["remaps"]
    scale = (summary["nf_max_reached"] / 8) ** 2 * per_step
    assert scale / 100 <= per_remap <= 100 * scale


# ============================================
# 掃描
# ============================================

def test_sweep_e1(tmp_path):
    cfg = small_cfg(tmp_path, "final_time=0.25")
    frame = sweep_e1(cfg, [1e-3, 1e-6])
    assert list(frame["e1"]) == [1e-3, 1e-6]
    assert set(frame["status"]) == {"ok"}
    assert (frame["nf"] == 16).all()
    # Δt = 1/Nf
    assert (frame["steps"] == 4).all()
    assert frame.loc[0, "remaps"] <= frame.loc[1, "remaps"]
    assert (tmp_path / "swirl2d_sweep_e1.csv").exists()
    with pytest.raises(ValueError):
        sweep_e1(cfg, [])


def test_sweep_records_failures(tmp_path):
    cfg = small_cfg(tmp_path, "scenario=custom", "velocity=test_bench_cli:nan_velocity", "set_center=0.5,0.5")
    frame = sweep_e1(cfg, [1e-4])
    assert frame.loc[0, "status"] == "failed"
    assert "(step 1)" in frame.loc[0, "error"]


def test_scaling_study(tmp_path):
    cfg = small_cfg(tmp_path, "final_time=0.125")
    frame = scaling_study(cfg, [8, 16])
    assert list(frame["n"]) == [8, 16]
    assert set(frame["cm_status"]) == {"ok"} and set(frame["gals_status"]) == {"ok"}
    assert list(frame["gals_steps"]) == [1, 2]
    with pytest.raises(ValueError):
        scaling_study(cfg, [32, 16])


# ============================================
# 命令列
# ============================================

def test_main_bad_key_returns_2(tmp_path):
    assert main(["run", "--set", f"output_dir={tmp_path}", "--set", "bogus=1"]) == 2


def test_main_nan_returns_1(tmp_path):
    argv = ["run", "--set", f"output_dir={tmp_path}", "--set", "scenario=custom",
            "--set", "velocity=test_bench_cli:nan_velocity", "--set", "set_center=0.5,0.5"]
    assert main(argv) == 1


def test_main_run_dump_load_contour(tmp_path, capsys):
    sets = []
    for item in CM_SMALL + [f"output_dir={tmp_path}", "final_time=0.5"]:
        sets += ["--set", item]
    assert main(["run", *sets, "--checkpoint-every", "4"]) == 0
    out = capsys.readouterr().out
    assert json.loads(out.strip().splitlines()[-1])["steps"] == 4
    assert (tmp_path / "run.log").exists()

    checkpoint = tmp_path / "swirl2d_cm" / "checkpoints" / "step_000004"
    map_path = tmp_path / "final.dump"
    assert main(["dump", "--checkpoint", str(checkpoint), "--out", str(map_path)]) == 0
    assert map_path.exists()

    capsys.readouterr()
    assert main(["load", "--map", str(map_path), "--eval", "0.5,0.5"]) == 0
    info = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert info["dims"] == 2
    assert len(info["mapped"]) == 1

    out_dir = tmp_path / "contours"
    assert main(["contour", *sets, "--map", str(map_path), "--out", str(out_dir)]) == 0
    assert (out_dir / "circle_contour.txt").exists()
