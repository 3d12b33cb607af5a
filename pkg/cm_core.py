#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Characteristic Mapping 核心模組

功能：
1. 粗網格工作映射 χ（GALS 平流）與細網格全域映射 χ0
2. 粒子誤差量測 M1，超過 E1 時觸發 remap（χ0 ← χ0∘χ，χ 重設為恆等）
3. 表示誤差 M2 與動態細網格（加倍 / 減半，受 Nf_min / Nf_max 限制）
4. 任意時間的集合求值：S(x, t) = S0(χ0(χ(x)))
5. checkpoint 寫入與讀回（可從任一狀態續跑）
"""

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Union

import numpy as np
from dotenv import dotenv_values
from pydantic import BaseModel, Field, model_validator

from flow import ParticleSet, VelocityField, advance_particles, reset_particles, seed_particles
from gals import GalsConfig, advect_map, time_steps
from hermite import (
    Boundary,
    GridGeometry,
    GridMismatchError,
    HermiteField,
    MapField,
    NonFiniteError,
    chain_rule_jet,
    dump_map,
    load_map,
    outer_orders,
)
from timing import PhaseTimer

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.txt"


def _is_power_of_two(ratio: float) -> bool:
    if ratio < 1 or int(ratio) != ratio:
        return False
    n = int(ratio)
    return n & (n - 1) == 0


class CmConfig(BaseModel):
    """
    CM 方法參數

    nc: 粗網格每軸格數
    nf_init / nf_min / nf_max: 細網格初始值與上下限（彼此相差 2 的冪次）
    e1: remap 容許誤差（長度單位）
    e2: 細網格調整容許誤差（長度單位）
    gamma: 每個粗網格格子的粒子數
    dt: 時間步長，未指定時為 cfl_default·(粗網格 Δx)
    """

    dims: int = Field(2, ge=2, le=3)
    nc: int = Field(32, ge=1)
    nf_init: int = Field(32, ge=1)
    nf_min: int = Field(16, ge=1)
    nf_max: int = Field(512, ge=1)
    e1: float = Field(5e-6, gt=0.0)
    e2: float = Field(1e-4, gt=0.0)
    gamma: int = Field(1, ge=1)
    dt: Optional[float] = Field(None, gt=0.0)
    cfl_default: float = Field(1.0, gt=0.0)
    epsilon_rel: float = Field(1e-4, gt=0.0, lt=0.5)
    boundary: Boundary = Boundary.CLAMPED
    dynamic_grid: bool = True
    keep_map_ledger: bool = False

    @model_validator(mode="after")
    def _check_fine_bounds(self):
        if not self.nf_min <= self.nf_init <= self.nf_max:
            raise ValueError(
                f"需要 nf_min ≤ nf_init ≤ nf_max: {self.nf_min}, {self.nf_init}, {self.nf_max}"
            )
        for name in ("nf_init", "nf_max"):
            if not _is_power_of_two(getattr(self, name) / self.nf_min):
                raise ValueError(f"{name} 與 nf_min 必須相差 2 的冪次")
        return self

    def geometry(self, cells: int) -> GridGeometry:
        return GridGeometry(dims=self.dims, cells=cells, boundary=self.boundary)

    def gals_config(self) -> GalsConfig:
        return GalsConfig(epsilon_rel=self.epsilon_rel, dt=self.dt, cfl_default=self.cfl_default)


@dataclass
class RemapRecord:
    step: int
    t: float
    m1: float
    nf_before: int
    nf_after: int
    m2_temp: Optional[float] = None
    m2_candidate: Optional[float] = None
    action: str = "keep"


@dataclass
class StepRecord:
    step: int
    t: float
    m1: float
    remapped: bool
    nf: int


@dataclass
class MapState:
    """
    CM 狀態

    chi: 粗網格工作映射（每次 remap 後重設為恆等）
    chi0: 細網格全域映射
    archived_maps: 除錯用，依序保存每段的 χ_i（keep_map_ledger 開啟時）
    """

    chi: MapField
    chi0: MapField
    particles: ParticleSet
    t: float = 0.0
    tau_history: List[float] = field(default_factory=list)
    remap_count: int = 0
    step_count: int = 0
    history: List[StepRecord] = field(default_factory=list)
    remaps: List[RemapRecord] = field(default_factory=list)
    archived_maps: List[MapField] = field(default_factory=list)
    saturations: int = 0

    @property
    def nf(self) -> int:
        return self.chi0.geometry.cells

    @property
    def nc(self) -> int:
        return self.chi.geometry.cells

    @property
    def dims(self) -> int:
        return self.chi.dims


def init_state(cfg: CmConfig) -> MapState:
    """t = 0：χ 與 χ0 皆為恆等，粒子位於初始位置"""
    coarse = cfg.geometry(cfg.nc)
    return MapState(
        chi=MapField.identity(coarse),
        chi0=MapField.identity(cfg.geometry(cfg.nf_init)),
        particles=seed_particles(coarse, cfg.gamma),
    )


# ============================================
# 誤差量測
# ============================================

def m1(chi: MapField, particles: ParticleSet) -> float:
    """max_p ‖χ(x_p(t)) − x_p⁰‖"""
    if particles.count == 0:
        raise ValueError("M1 需要至少一個粒子")
    mapped = chi.eval(particles.positions)
    return float(np.max(np.linalg.norm(mapped - particles.initial_positions, axis=1)))


def compose_into_fine(chi0: MapField, chi: MapField, target: GridGeometry) -> MapField:
    """
    在 target 網格上建立 χ0∘χ

    位移表示：δ_c(x) = δ(x) + δ0(x + δ(x))；節點導數以鏈鎖律組合
    （χ 的解析 jet × χ0 在 χ(x) 處的解析導數）。
    """
    if not (chi0.geometry.same_domain(target) and chi.geometry.same_domain(target)):
        raise GridMismatchError("組合映射需要相同區域與邊界")
    dims = target.dims
    nodes = target.node_points()
    delta_jet = chi.displacement.jet(nodes)
    inner = chi.jet(nodes)
    outer = chi0.displacement.derivatives(inner[:, :, 0], outer_orders(dims))
    jet = delta_jet + chain_rule_jet(outer, inner, dims)
    if not np.all(np.isfinite(jet)):
        raise NonFiniteError("組合映射含 NaN 或 Inf")
    return MapField(HermiteField(target, jet.reshape(target.node_shape + jet.shape[1:])))


def m2(candidate: MapField, chi0: MapField, chi: MapField) -> float:
    """候選映射與 χ0∘χ 在候選網格格心上的最大差距"""
    samples = candidate.geometry.cell_centers()
    exact = chi0.eval(chi.eval(samples))
    return float(np.max(np.linalg.norm(candidate.eval(samples) - exact, axis=1)))


# ============================================
# Remap
# ============================================

def remap(
    state: MapState,
    cfg: CmConfig,
    timer: Optional[PhaseTimer] = None,
    trigger_m1: float = float("nan"),
) -> MapState:
    """
    χ0 ← χ0∘χ（必要時改變細網格解析度），接著 χ ← 恆等、粒子重設

    動態網格：M2(temp) > E2 時改用 2Nf（上限 Nf_max，已在上限則記錄飽和）；
    否則嘗試 Nf/2（下限 Nf_min），M2(coarse) < E2 才採用。
    """
    timer = timer or PhaseTimer()
    nf = state.nf
    geometry = state.chi0.geometry
    record = RemapRecord(step=state.step_count, t=state.t, m1=trigger_m1, nf_before=nf, nf_after=nf)
    saturations = state.saturations

    with timer.phase("remapping"):
        adopted = compose_into_fine(state.chi0, state.chi, geometry)
        if cfg.dynamic_grid:
            record.m2_temp = m2(adopted, state.chi0, state.chi)
            if record.m2_temp > cfg.e2:
                if nf < cfg.nf_max:
                    refined = compose_into_fine(state.chi0, state.chi, geometry.with_cells(min(2 * nf, cfg.nf_max)))
                    record.m2_candidate = m2(refined, state.chi0, state.chi)
                    adopted = refined
                    record.action = "refine"
                else:
                    saturations += 1
                    timer.count("saturations")
                    record.action = "saturated"
                    logger.warning(
                        f"細網格已達上限 Nf_max={cfg.nf_max}，M2={record.m2_temp:.3e} > E2={cfg.e2:.1e} (t={state.t:.4f})"
                    )
            elif nf // 2 >= cfg.nf_min and nf > 1:
                coarse = compose_into_fine(state.chi0, state.chi, geometry.with_cells(nf // 2))
                record.m2_candidate = m2(coarse, state.chi0, state.chi)
                if record.m2_candidate < cfg.e2:
                    adopted = coarse
                    record.action = "coarsen"

    record.nf_after = adopted.geometry.cells
    archived = list(state.archived_maps)
    if cfg.keep_map_ledger:
        archived.append(state.chi)

    m2_text = "" if record.m2_temp is None else f" M2={record.m2_temp:.3e}"
    logger.info(
        f"Remap #{state.remap_count + 1} t={state.t:.4f} M1={trigger_m1:.3e}{m2_text} "
        f"Nf {nf}→{record.nf_after} ({record.action})"
    )
    return replace(
        state,
        chi=MapField.identity(state.chi.geometry),
        chi0=adopted,
        particles=reset_particles(state.particles),
        tau_history=state.tau_history + [state.t],
        remap_count=state.remap_count + 1,
        remaps=state.remaps + [record],
        archived_maps=archived,
        saturations=saturations,
    )


# ============================================
# 主迴圈
# ============================================

def cm_run(
    cfg: CmConfig,
    vfield: VelocityField,
    final_time: float,
    state: Optional[MapState] = None,
    timer: Optional[PhaseTimer] = None,
    on_step: Optional[Callable[[MapState, StepRecord], None]] = None,
) -> MapState:
    """
    CM 主迴圈：每步平流 χ 與粒子，M1 > E1 時 remap

    Args:
        state: 續跑的起始狀態（None 表示從 t=0 開始）
        on_step: 每步完成後呼叫 on_step(state, record)（紀錄、快照、checkpoint 用）
    """
    if final_time < 0:
        raise ValueError(f"終止時間不得為負: {final_time}")
    timer = timer or PhaseTimer()
    state = state if state is not None else init_state(cfg)
    gals_cfg = cfg.gals_config()
    dt = gals_cfg.step_size(state.chi.geometry)

    for t, h in time_steps(state.t, final_time, dt):
        step = state.step_count + 1
        try:
            chi = advect_map(state.chi, vfield, t, h, gals_cfg, timer)
            with timer.phase("particles"):
                particles = advance_particles(state.particles, vfield, t, h)
            if not np.all(np.isfinite(particles.positions)):
                raise NonFiniteError("粒子位置含 NaN 或 Inf")
        except NonFiniteError as e:
            logger.error(f"數值發散，於第 {step} 步中止: {e}")
            raise NonFiniteError(str(e), step=step) from e

        state = replace(state, chi=chi, particles=particles, t=t + h, step_count=step)
        error = m1(chi, particles)
        remapped = error > cfg.e1
        if remapped:
            state = remap(state, cfg, timer, trigger_m1=error)
        record = StepRecord(step=step, t=state.t, m1=error, remapped=remapped, nf=state.nf)
        state.history.append(record)
        if on_step is not None:
            on_step(state, record)

    logger.info(
        f"CM 完成: {state.step_count} 步, {state.remap_count} 次 remap, t={state.t:.4f}, Nf={state.nf}"
    )
    return state


def global_map_eval(state: MapState, x, mode: str = "final") -> np.ndarray:
    """
    final: χ0(χ(x))，整段時間的反向映射
    intermediate: χ(x)，目前這段（自上次 remap 起）的反向映射
    """
    if mode == "final":
        return state.chi0.eval(state.chi.eval(x))
    if mode == "intermediate":
        return state.chi.eval(x)
    raise ValueError(f"未知的求值模式: {mode}")


def archived_map_eval(state: MapState, x) -> np.ndarray:
    """以保存的各段 χ_i 逐層求值：χ_1(χ_2(…χ(x)))"""
    y = state.chi.eval(x)
    for chi_i in reversed(state.archived_maps):
        y = chi_i.eval(y)
    return y


# ============================================
# Checkpoint
# ============================================

def save_checkpoint(state: MapState, directory: Union[str, Path]) -> Path:
    """寫出 χ、χ0（Hermite dump）、粒子與文字 manifest"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    dump_map(state.chi, directory / "chi.dump")
    dump_map(state.chi0, directory / "chi0.dump")
    np.savetxt(
        directory / "particles.txt",
        np.hstack([state.particles.initial_positions, state.particles.positions]),
        fmt="%.17g",
        header="initial positions, current positions",
    )
    manifest = {
        "t": repr(state.t),
        "step_count": state.step_count,
        "remap_count": state.remap_count,
        "nf": state.nf,
        "nc": state.nc,
        "saturations": state.saturations,
        "tau_history": " ".join(repr(tau) for tau in state.tau_history),
    }
    with open(directory / MANIFEST_FILE, "w", encoding="utf-8") as fh:
        for key, value in manifest.items():
            fh.write(f'{key}="{value}"\n')
    logger.debug(f"checkpoint 已寫出: {directory} (t={state.t:.4f})")
    return directory


def load_checkpoint(directory: Union[str, Path]) -> MapState:
    """讀回 save_checkpoint 的輸出，可直接傳給 cm_run 續跑"""
    directory = Path(directory)
    manifest = dotenv_values(directory / MANIFEST_FILE)
    if not manifest:
        raise ValueError(f"找不到 checkpoint manifest: {directory}")
    chi = load_map(directory / "chi.dump")
    chi0 = load_map(directory / "chi0.dump")
    table = np.atleast_2d(np.loadtxt(directory / "particles.txt", dtype=float))
    dims = chi.dims
    particles = ParticleSet(table[:, :dims], table[:, dims:])
    taus = manifest.get("tau_history") or ""
    return MapState(
        chi=chi,
        chi0=chi0,
        particles=particles,
        t=float(manifest["t"]),
        tau_history=[float(v) for v in taus.split()],
        remap_count=int(manifest["remap_count"]),
        step_count=int(manifest["step_count"]),
        saturations=int(manifest.get("saturations") or 0),
    )
