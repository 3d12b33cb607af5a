#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
實驗與命令列模組

功能：
1. run：執行單一場景（CM 或 GALS 基準），輸出快照、指標、計時、history、summary
2. sweep-e1：E1 掃描（固定 Δt = 1/Nf，不用動態網格），可多程序平行
3. scaling：CM 與 GALS 在不同 Nf / Ng 下的時間與誤差
4. contour：從映射 dump 或 checkpoint 擷取拉回集合的等值線
5. dump / load：映射 dump 格式的寫出與讀回

使用方式：
    python bench_cli.py run --set scenario=swirl2d --set period=8
    python bench_cli.py sweep-e1 --values 1e-3 1e-4 1e-5 1e-6
    python bench_cli.py scaling --sizes 32 64 128 256
"""

import argparse
import importlib
import json
import logging
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from cm_core import MapState, compose_into_fine, init_state, load_checkpoint, cm_run, save_checkpoint
from config import (
    LOG_LEVEL,
    ConfigError,
    Method,
    RunConfig,
    Scenario,
    load_run_config,
    save_run_config,
)
from flow import VelocityField, custom_field, deform_3d, mandel_field_2d, mosaic_2d, swirl_2d
from gals import gals_advect_scalar_run
from hermite import GridGeometry, NonFiniteError, dump_map, fill_from_function, load_map
from ledger import get_ledger
from sets import (
    CircleLevelSet,
    Mandelbrot,
    Mosaic,
    SetFunction,
    SphereLevelSet,
    advected_set_eval,
    contour_from_samples,
    open_curve_sets,
    sample_grid,
    set_metrics,
    track_tracers,
    write_contour,
    write_metrics_csv,
    write_pgm,
)
from timing import PhaseTimer, TimingReport, mean_steps_between_remaps

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(levelname)s - %(name)s - %(message)s'

# 場景對應的速度場
FLOW_FACTORIES = {
    Scenario.SWIRL_2D: swirl_2d,
    Scenario.OPEN_CURVES: swirl_2d,
    Scenario.DEFORM_3D: deform_3d,
    Scenario.MANDELBROT: mandel_field_2d,
    Scenario.MOSAIC: mosaic_2d,
}


def setup_logging(output_dir: Optional[Path] = None, level: str = LOG_LEVEL):
    """StreamHandler + UTF-8 FileHandler（<output_dir>/run.log）"""
    handlers: List[logging.Handler] = [logging.StreamHandler()]
    if output_dir is not None:
        Path(output_dir).mkdir(parents=True, exist_ok=True)
        handlers.insert(0, logging.FileHandler(Path(output_dir) / "run.log", encoding='utf-8'))
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format=LOG_FORMAT,
        handlers=handlers,
        force=True,
    )


# ============================================
# 場景組裝
# ============================================

def build_velocity(cfg: RunConfig) -> VelocityField:
    if cfg.scenario is Scenario.CUSTOM:
        module_name, _, attr = cfg.velocity.partition(":")
        try:
            fn = getattr(importlib.import_module(module_name), attr)
        except (ImportError, AttributeError) as e:
            raise ConfigError("velocity", f"無法載入自訂速度場 {cfg.velocity}: {e}") from e
        return custom_field(fn, dims=cfg.dims)
    return FLOW_FACTORIES[cfg.scenario](cfg.period)


def build_sets(cfg: RunConfig) -> Dict[str, SetFunction]:
    """場景的初始集合（label → S0）"""
    if cfg.scenario is Scenario.DEFORM_3D:
        return {"sphere": SphereLevelSet(center=tuple(cfg.set_center), radius=cfg.set_radius)}
    if cfg.scenario is Scenario.MANDELBROT:
        return {"mandelbrot": Mandelbrot(max_iter=cfg.mandel_max_iter)}
    if cfg.scenario is Scenario.MOSAIC:
        return {"mosaic": Mosaic(kx=cfg.mosaic_kx, ky=cfg.mosaic_ky, stagger=cfg.mosaic_stagger)}
    if cfg.scenario is Scenario.OPEN_CURVES:
        parts = open_curve_sets(thickness=1.5 / cfg.resolution)
        labels = [f"branch_{i + 1}" for i in range(len(parts) - 1)] + ["circle"]
        return dict(zip(labels, parts))
    return {"circle": CircleLevelSet(center=tuple(cfg.set_center), radius=cfg.set_radius)}


def default_tracers(cfg: RunConfig) -> List[tuple]:
    """
    示蹤粒子起點；馬賽克場景預設放在相位交點（兩個三相點、一個四相點）
    """
    if cfg.tracer_points:
        return cfg.tracers()
    if cfg.scenario is Scenario.MOSAIC and cfg.mosaic_stagger and cfg.mosaic_ky == 3:
        kx = cfg.mosaic_kx
        return [(1.0 / kx, 1.0 / 3.0), (0.5, 2.0 / 3.0), (2.0 / kx, 1.0)]
    return []


def _step_size(cfg: RunConfig, cells: int) -> float:
    return cfg.dt if cfg.dt is not None else cfg.cfl_default / cells


# ============================================
# 輸出
# ============================================

def write_snapshot(
    run_dir: Path,
    t: float,
    evaluators: Dict[str, Callable[[np.ndarray], np.ndarray]],
    sets: Dict[str, SetFunction],
    cfg: RunConfig,
):
    """每個集合寫出等值線（level set 類）與 PGM（2D）"""
    snap_dir = run_dir / "snapshots"
    for label, fn in evaluators.items():
        values = sample_grid(fn, cfg.resolution, cfg.dims)
        stem = f"{label}_t{t:08.4f}"
        if sets[label].is_level_set:
            write_contour(contour_from_samples(values), snap_dir / f"{stem}.txt")
        if cfg.dims == 2:
            write_pgm(values, snap_dir / f"{stem}.pgm")
    logger.info(f"快照已寫出: t={t:.4f} ({', '.join(evaluators)})")


def _snapshot_targets(cfg: RunConfig, t0: float) -> List[float]:
    inner = {float(t) for t in cfg.snapshot_times if t0 < t < cfg.final_time}
    targets = sorted(inner)
    if cfg.final_time > t0:
        targets.append(cfg.final_time)
    return targets


def _cm_evaluators(state: MapState, sets: Dict[str, SetFunction]):
    return {label: (lambda pts, s=s: advected_set_eval(s, state, pts)) for label, s in sets.items()}


# ============================================
# 單一場景
# ============================================

def _run_cm(cfg, run_dir, vfield, sets, timer, output, ledger, run_id, resume):
    cm = cfg.cm_config()
    state = load_checkpoint(resume) if resume else init_state(cm)
    nf_start, t_start = state.nf, state.t
    checkpoint_dir = run_dir / "checkpoints"

    def on_step(current: MapState, record):
        ledger.record_step(run_id, record.step, record.t, record.m1, record.remapped, record.nf)
        if record.remapped:
            r = current.remaps[-1]
            ledger.record_remap(run_id, r.step, r.t, r.m1, r.nf_before, r.nf_after, r.m2_temp, r.m2_candidate, r.action)
        if cfg.checkpoint_every and record.step % cfg.checkpoint_every == 0:
            with output.phase("output"):
                save_checkpoint(current, checkpoint_dir / f"step_{record.step:06d}")

    with output.phase("output"):
        write_snapshot(run_dir, state.t, _cm_evaluators(state, sets), sets, cfg)
    for target in _snapshot_targets(cfg, state.t):
        state = cm_run(cm, vfield, target, state=state, timer=timer, on_step=on_step)
        with output.phase("output"):
            write_snapshot(run_dir, state.t, _cm_evaluators(state, sets), sets, cfg)

    history = pd.DataFrame(
        [vars(r) for r in state.history], columns=["step", "t", "m1", "remapped", "nf"]
    )
    history.to_csv(run_dir / "history.csv", index=False)

    nf_trace = [(nf_start, t_start)]
    nf_trace += [(r.nf, r.t) for r in state.history]
    nf_max, t_nf_max = max(nf_trace, key=lambda item: item[0])
    info = {
        "steps": state.step_count,
        "remaps": state.remap_count,
        "mean_steps_between_remaps": mean_steps_between_remaps(state.step_count, state.remap_count),
        "nf_final": state.nf,
        "nf_max_reached": nf_max,
        "t_nf_max": t_nf_max,
        "tau_history": state.tau_history,
        "saturations": state.saturations,
        "trigger_violations": ledger.trigger_violations(run_id, cm.e1) if math.isfinite(cm.e1) else 0,
        "nodes": state.chi.geometry.node_count,
        "components": cfg.dims,
    }
    return _cm_evaluators(state, sets), info


def _run_gals(cfg, run_dir, vfield, sets, timer, output):
    geometry = GridGeometry(dims=cfg.dims, cells=cfg.ng, boundary=cfg.boundary)
    gals_cfg = cfg.gals_config()
    fields = {label: fill_from_function(geometry, s) for label, s in sets.items()}
    steps = {"count": 0}

    def count_step(step, t, field):
        steps["count"] += 1

    t = 0.0
    with output.phase("output"):
        write_snapshot(run_dir, t, {k: f.eval for k, f in fields.items()}, sets, cfg)
    for target in _snapshot_targets(cfg, t):
        for label in fields:
            fields[label] = gals_advect_scalar_run(fields[label], vfield, t, target, gals_cfg, timer, on_step=count_step)
        t = target
        with output.phase("output"):
            write_snapshot(run_dir, t, {k: f.eval for k, f in fields.items()}, sets, cfg)

    gals_steps = steps["count"] // max(1, len(fields))
    info = {
        "steps": gals_steps,
        "remaps": 0,
        "mean_steps_between_remaps": mean_steps_between_remaps(gals_steps, 0),
        "ng": cfg.ng,
        "nodes": geometry.node_count,
        "components": len(fields),
    }
    return {k: f.eval for k, f in fields.items()}, info


def run_scenario(cfg: RunConfig, resume: Optional[Path] = None) -> Dict[str, Any]:
    """
    執行一個場景並把所有輸出寫入 cfg.run_dir()

    Returns:
        summary（同 summary.json）
    """
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    save_run_config(cfg, run_dir)
    ledger = get_ledger(run_dir)
    run_id = ledger.start_run(cfg.scenario.value, cfg.method.value, cfg.model_dump(mode="json"))

    vfield = build_velocity(cfg)
    sets = build_sets(cfg)
    timer = PhaseTimer()
    output = PhaseTimer()
    started = time.perf_counter()
    logger.info(
        f"開始: {cfg.scenario.value} / {cfg.method.value}, T={cfg.final_time}, A={cfg.period} → {run_dir}"
    )

    try:
        if cfg.method is Method.CM:
            evaluators, info = _run_cm(cfg, run_dir, vfield, sets, timer, output, ledger, run_id, resume)
        else:
            evaluators, info = _run_gals(cfg, run_dir, vfield, sets, timer, output)
    except NonFiniteError as e:
        logger.error(f"執行中止 (step={e.step}): {e}")
        ledger.finish_run(run_id, status="failed", error=f"step {e.step}: {e}")
        raise

    wall = time.perf_counter() - started
    compute = max(0.0, wall - output.seconds.get("output", 0.0))
    report = TimingReport.from_timer(timer, info["steps"], info["remaps"], info["nodes"], info["components"], total=compute)
    report.to_frame().to_csv(run_dir / "timing.csv", index=False)

    # 時間可逆的場景在 t = T 的精確解就是 S0
    metrics = [
        set_metrics(s, evaluators[label], cfg.resolution, cfg.dims, label=label, t=cfg.final_time)
        for label, s in sets.items()
    ]
    write_metrics_csv(metrics, run_dir / "metrics.csv")

    summary: Dict[str, Any] = {
        "scenario": cfg.scenario.value,
        "method": cfg.method.value,
        "label": cfg.label,
        "final_time": cfg.final_time,
        "period": cfg.period,
        **{k: v for k, v in info.items() if k not in ("nodes", "components")},
        "compute_seconds": compute,
        "wall_seconds": wall,
        "clamped_footpoints": report.clamped_footpoints,
        "timing": report.model_dump(),
        "metrics": [m.model_dump() for m in metrics],
    }

    tracers = default_tracers(cfg)
    if tracers:
        paths = track_tracers(tracers, vfield, 0.0, cfg.final_time, _step_size(cfg, cfg.nf_max))
        distances = np.linalg.norm(paths[-1] - paths[0], axis=1)
        pd.DataFrame(
            np.hstack([paths[0], paths[-1], distances[:, None]]),
            columns=[f"x0_{i}" for i in range(cfg.dims)] + [f"x1_{i}" for i in range(cfg.dims)] + ["distance"],
        ).to_csv(run_dir / "tracers.csv", index=False)
        summary["tracer_max_return"] = float(distances.max())

    with open(run_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, ensure_ascii=False, default=str)
    ledger.finish_run(run_id, status="finished", metrics={m.label: m.model_dump() for m in metrics})
    logger.info(f"完成: {cfg.scenario.value} / {cfg.method.value}, 計算 {compute:.2f}s")
    return summary


# ============================================
# 掃描
# ============================================

def _variant(cfg: RunConfig, **updates) -> RunConfig:
    return RunConfig(**{**cfg.model_dump(), **updates})


def _run_variant(payload: Dict[str, Any]) -> Dict[str, Any]:
    """單一掃描執行（可在子程序中呼叫）"""
    cfg = RunConfig(**payload)
    summary = run_scenario(cfg)
    first = summary["metrics"][0] if summary["metrics"] else {}
    return {
        "steps": summary["steps"],
        "remaps": summary["remaps"],
        "mean_steps_between_remaps": summary["mean_steps_between_remaps"],
        "l2": first.get("l2"),
        "hausdorff": first.get("hausdorff"),
        "compute_seconds": summary["compute_seconds"],
    }


def _execute(payloads: List[Dict[str, Any]], parallel: int) -> List[Dict[str, Any]]:
    """依序或以多程序執行；失敗的執行記錄下來，其餘繼續"""
    results: List[Dict[str, Any]] = []
    if parallel and parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            futures = [pool.submit(_run_variant, p) for p in payloads]
            for payload, future in zip(payloads, futures):
                results.append(_collect(payload, future.result))
    else:
        for payload in payloads:
            results.append(_collect(payload, lambda p=payload: _run_variant(p)))
    return results


def _collect(payload: Dict[str, Any], call: Callable[[], Dict[str, Any]]) -> Dict[str, Any]:
    try:
        return {**call(), "status": "ok", "error": ""}
    except Exception as e:
        logger.warning(f"執行失敗 ({payload.get('label')}): {e}")
        return {"status": "failed", "error": str(e)}


def sweep_e1(cfg: RunConfig, e1_values: Sequence[float], parallel: Optional[int] = None) -> pd.DataFrame:
    """
    E1 掃描：每個 E1 一次執行，Δt = 1/Nf 固定，關閉動態網格

    Returns:
        DataFrame（同時寫入 <output_dir>/sweep_e1.csv）
    """
    if not e1_values:
        raise ValueError("E1 掃描至少需要一個值")
    nf = cfg.nf_init
    base = cfg.label or cfg.scenario.value
    payloads = []
    for e1 in e1_values:
        variant = _variant(
            cfg,
            e1=float(e1),
            dynamic_grid=False,
            nf_min=nf,
            nf_max=nf,
            dt=1.0 / nf,
            method=Method.CM,
            snapshot_times=[],
            label=f"{base}_e1_{float(e1):.0e}",
        )
        payloads.append(variant.model_dump())

    results = _execute(payloads, cfg.parallel if parallel is None else parallel)
    rows = [{"e1": float(e1), "nc": cfg.nc, "nf": nf, **r} for e1, r in zip(e1_values, results)]
    frame = pd.DataFrame(rows)
    out = Path(cfg.output_dir) / f"{base}_sweep_e1.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False)
    logger.info(f"E1 掃描完成: {len(rows)} 次執行 → {out}")
    return frame


def scaling_study(cfg: RunConfig, sizes: Sequence[int], parallel: Optional[int] = None) -> pd.DataFrame:
    """
    固定 Nc，Nf = Ng = N，Δt = 1/N：比較 CM 與 GALS 的時間與誤差
    """
    sizes = [int(n) for n in sizes]
    if not sizes:
        raise ValueError("scaling 至少需要一個網格大小")
    if sizes != sorted(sizes):
        raise ValueError(f"網格大小必須遞增: {sizes}")
    base = cfg.label or cfg.scenario.value
    payloads = []
    for n in sizes:
        common = dict(dt=1.0 / n, snapshot_times=[], dynamic_grid=False)
        payloads.append(_variant(cfg, method=Method.CM, nf_init=n, nf_min=n, nf_max=n, label=f"{base}_cm_{n}", **common).model_dump())
        payloads.append(_variant(cfg, method=Method.GALS, ng=n, nf_init=n, nf_min=n, nf_max=n, label=f"{base}_gals_{n}", **common).model_dump())

    results = _execute(payloads, cfg.parallel if parallel is None else parallel)
    rows = []
    for i, n in enumerate(sizes):
        cm, gals = results[2 * i], results[2 * i + 1]
        row = {"n": n, "nc": cfg.nc}
        for prefix, result in (("cm", cm), ("gals", gals)):
            for key in ("compute_seconds", "l2", "hausdorff", "steps", "status"):
                row[f"{prefix}_{key}"] = result.get(key)
        rows.append(row)
    frame = pd.DataFrame(rows)
    out = Path(cfg.output_dir) / f"{base}_scaling.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(out, index=False)
    logger.info(f"scaling 完成: sizes={sizes} → {out}")
    return frame


# ============================================
# 映射工具
# ============================================

def composed_map(state: MapState):
    """χ0∘χ 組合到目前細網格上"""
    return compose_into_fine(state.chi0, state.chi, state.chi0.geometry)


def contour_from_map(map_path: Path, cfg: RunConfig, iso: float, out_dir: Path) -> List[Path]:
    """以 dump 的映射拉回場景集合並寫出等值線"""
    chi = load_map(map_path)
    written = []
    for label, s in build_sets(cfg).items():
        values = sample_grid(lambda pts, s=s: s(chi.eval(pts)), cfg.resolution, chi.dims)
        written.append(write_contour(contour_from_samples(values, iso), out_dir / f"{label}_contour.txt"))
    return written


# ============================================
# 命令列
# ============================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Characteristic Mapping 集合平流實驗",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    parser.add_argument("--log-level", default=LOG_LEVEL)
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", type=Path, help="key=value 設定檔")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    p = sub.add_parser("run", help="執行單一場景")
    config_args(p)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", type=Path, help="從 checkpoint 目錄續跑")

    p = sub.add_parser("sweep-e1", help="E1 掃描")
    config_args(p)
    p.add_argument("--values", type=float, nargs="+", required=True)
    p.add_argument("--parallel", type=int)

    p = sub.add_parser("scaling", help="CM / GALS 網格大小比較")
    config_args(p)
    p.add_argument("--sizes", type=int, nargs="+", required=True)
    p.add_argument("--parallel", type=int)

    p = sub.add_parser("contour", help="由映射 dump 擷取等值線")
    config_args(p)
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--iso", type=float, default=0.0)
    p.add_argument("--out", type=Path, default=Path("."))

    p = sub.add_parser("dump", help="把 checkpoint 的 χ0∘χ 寫成映射 dump")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("load", help="讀回映射 dump 並顯示摘要")
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--eval", dest="points", action="append", default=[], metavar="X,Y[,Z]")
    return parser


def _load(args) -> RunConfig:
    overrides = list(args.overrides)
    if getattr(args, "checkpoint_every", None) is not None:
        overrides.append(f"checkpoint_every={args.checkpoint_every}")
    return load_run_config(args.config, overrides)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in ("run", "sweep-e1", "scaling", "contour"):
            cfg = _load(args)
            setup_logging(Path(cfg.output_dir), args.log_level)
            if args.command == "run":
                summary = run_scenario(cfg, resume=args.resume)
                print(json.dumps({k: summary[k] for k in ("steps", "remaps", "compute_seconds")}))
            elif args.command == "sweep-e1":
                print(sweep_e1(cfg, args.values, args.parallel).to_csv(index=False))
            elif args.command == "scaling":
                print(scaling_study(cfg, args.sizes, args.parallel).to_csv(index=False))
            else:
                for path in contour_from_map(args.map, cfg, args.iso, args.out):
                    print(path)
        elif args.command == "dump":
            setup_logging(level=args.log_level)
            state = load_checkpoint(args.checkpoint)
            print(dump_map(composed_map(state), args.out))
        else:
            setup_logging(level=args.log_level)
            chi = load_map(args.map)
            info = {
                "dims": chi.dims,
                "cells": chi.geometry.cells,
                "boundary": chi.geometry.boundary.value,
                "max_displacement": float(np.max(np.abs(chi.displacement.data))),
            }
            if args.points:
                pts = np.array([[float(v) for v in p.split(",")] for p in args.points])
                info["mapped"] = chi.eval(pts).tolist()
            print(json.dumps(info))
    except ConfigError as e:
        logger.error(f"設定錯誤: {e}")
        print(f"設定錯誤: {e}", file=sys.stderr)
        return 2
    except NonFiniteError as e:
        print(f"數值發散 (step={e.step}): {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
