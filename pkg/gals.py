#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
GALS 平流模組 - Gradient-Augmented Level Set 半拉格朗日步

功能：
1. gals_step：純量場或向量場的一步 GALS（值與全部混合偏導一起傳輸）
2. advect_map：映射 χ 的一步 GALS（各分量共用同一組 footpoint）
3. gals_advect_scalar_run：單網格 GALS 基準解（與 CM 比較用）

導數傳輸：
- 每個節點追蹤 2^d 個 ε 偏移點 x_i + ε(±1, …, ±1)，ε = epsilon_rel·Δx
- 偏移點的反向位移取平均得 footpoint，交錯符號差分得 footpoint 映射的混合導數
- 新節點資料 = 舊插值函數的解析導數經鏈鎖律組合（hermite.chain_rule_jet）
差分作用在位移上而非座標上，v ≡ 0 時結果與輸入完全相同。
"""

import logging
import math
from itertools import product
from typing import Callable, Iterator, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from flow import VelocityField, backward_displacement
from hermite import (
    GridGeometry,
    HermiteField,
    MapField,
    NonFiniteError,
    chain_rule_jet,
    coefficient_masks,
    mask_axes,
    outer_orders,
)
from timing import PhaseTimer

logger = logging.getLogger(__name__)


class GalsConfig(BaseModel):
    """
    GALS 參數

    epsilon_rel: 偏移量 ε 佔格寬的比例
    dt: 時間步長；未指定時為 cfl_default·Δx
    """

    epsilon_rel: float = Field(1e-4, gt=0.0, lt=0.5)
    dt: Optional[float] = Field(None, gt=0.0)
    cfl_default: float = Field(1.0, gt=0.0)

    def step_size(self, geometry: GridGeometry) -> float:
        return self.dt if self.dt is not None else self.cfl_default * geometry.dx


def time_steps(t0: float, t1: float, dt: float) -> Iterator[Tuple[float, float]]:
    """產生 (t, h)：固定步長 dt，最後一步截到 t1"""
    if dt <= 0:
        raise ValueError(f"dt 必須為正: {dt}")
    span = t1 - t0
    if span <= 0:
        return
    n = max(1, int(math.ceil(span / dt - 1e-9)))
    for k in range(n):
        t = t0 + k * dt
        h = (t1 - t) if k == n - 1 else dt
        if h > 0:
            yield t, h


# ============================================
# footpoint 叢集
# ============================================

def _cluster_signs(dims: int) -> np.ndarray:
    return np.array(list(product((1.0, -1.0), repeat=dims)))


def footpoint_jet(
    geometry: GridGeometry,
    vfield: VelocityField,
    t: float,
    dt: float,
    cfg: GalsConfig,
    timer: Optional[PhaseTimer] = None,
) -> np.ndarray:
    """
    每個節點的反向位移 jet (node_count, d, 2^d)

    [:, :, 0] 為位移 D = footpoint − x，其餘為 D 對相異軸的混合導數。
    """
    timer = timer or PhaseTimer()
    dims = geometry.dims
    nodes = geometry.node_points()
    signs = _cluster_signs(dims)
    eps = cfg.epsilon_rel * geometry.dx
    points = (nodes[:, None, :] + eps * signs[None, :, :]).reshape(-1, dims)

    with timer.phase("footpoints"):
        disp = backward_displacement(vfield, points, t, dt).reshape(len(nodes), len(signs), dims)
    if not np.all(np.isfinite(disp)):
        raise NonFiniteError(f"footpoint 位移含 NaN 或 Inf (t={t})")

    masks = coefficient_masks(dims)
    jet = np.empty((len(nodes), dims, len(masks)))
    for j, mask in enumerate(masks):
        axes = mask_axes(mask)
        weights = np.prod(signs[:, list(axes)], axis=1) if axes else np.ones(len(signs))
        jet[:, :, j] = np.einsum("s,msi->mi", weights, disp) / (len(signs) * eps ** len(axes))

    if not geometry.periodic:
        foot = nodes + jet[:, :, 0]
        # 叢集平均的位移誤差為 O(ε²)，ε 以內視為落在邊界上
        outside = int(np.count_nonzero(~geometry.contains(foot, tol=eps)))
        if outside:
            # 出界的 footpoint 在求值時夾回邊界
            timer.count("clamped_footpoints", outside)
            logger.warning(f"{outside} 個 footpoint 超出區域，已夾回邊界 (t={t})")
    return jet


def _footpoint_map_jet(geometry: GridGeometry, disp_jet: np.ndarray) -> np.ndarray:
    """footpoint 映射 Y(x) = x + D(x) 的 jet"""
    inner = disp_jet.copy()
    inner[:, :, 0] += geometry.node_points()
    masks = coefficient_masks(geometry.dims)
    for i in range(geometry.dims):
        inner[:, i, masks.index(1 << i)] += 1.0
    return inner


def _pull_back(hfield: HermiteField, inner: np.ndarray, timer: PhaseTimer) -> np.ndarray:
    """舊場在 footpoint 上的解析導數，經鏈鎖律得到新節點 jet"""
    dims = hfield.dims
    with timer.phase("interpolation"):
        outer = hfield.derivatives(inner[:, :, 0], outer_orders(dims))
        return chain_rule_jet(outer, inner, dims)


def _checked(jet: np.ndarray, t: float) -> np.ndarray:
    if not np.all(np.isfinite(jet)):
        raise NonFiniteError(f"GALS 結果含 NaN 或 Inf (t={t})")
    return jet


# ============================================
# GALS 步
# ============================================

def gals_step(
    hfield: HermiteField,
    vfield: VelocityField,
    t: float,
    dt: float,
    cfg: GalsConfig,
    timer: Optional[PhaseTimer] = None,
) -> HermiteField:
    """
    一步 GALS：f_new(x) = f_old(Y(x))，Y 為從 t+dt 回到 t 的 footpoint 映射

    Returns:
        新的 HermiteField（不修改輸入場）
    """
    if dt <= 0:
        raise ValueError(f"dt 必須為正: {dt}")
    timer = timer or PhaseTimer()
    geometry = hfield.geometry
    disp_jet = footpoint_jet(geometry, vfield, t, dt, cfg, timer)
    jet = _checked(_pull_back(hfield, _footpoint_map_jet(geometry, disp_jet), timer), t)
    return HermiteField(geometry, jet.reshape(geometry.node_shape + jet.shape[1:]))


def advect_map(
    chi: MapField,
    vfield: VelocityField,
    t: float,
    dt: float,
    cfg: GalsConfig,
    timer: Optional[PhaseTimer] = None,
) -> MapField:
    """
    映射的一步 GALS

    χ_new(x) = χ_old(Y(x))，以位移表示為 δ_new = D + δ_old∘Y；
    d 個分量共用同一組 footpoint 追蹤。
    """
    if dt <= 0:
        raise ValueError(f"dt 必須為正: {dt}")
    timer = timer or PhaseTimer()
    geometry = chi.geometry
    disp_jet = footpoint_jet(geometry, vfield, t, dt, cfg, timer)
    pulled = _pull_back(chi.displacement, _footpoint_map_jet(geometry, disp_jet), timer)
    jet = _checked(disp_jet + pulled, t)
    return MapField(HermiteField(geometry, jet.reshape(geometry.node_shape + jet.shape[1:])))


def gals_advect_scalar_run(
    hfield: HermiteField,
    vfield: VelocityField,
    t0: float,
    t1: float,
    cfg: GalsConfig,
    timer: Optional[PhaseTimer] = None,
    on_step: Optional[Callable[[int, float, HermiteField], None]] = None,
) -> HermiteField:
    """
    單網格 GALS 基準：從 t0 重複 gals_step 到 t1

    Args:
        on_step: 每步完成後呼叫 on_step(step, t, field)（快照用）
    """
    timer = timer or PhaseTimer()
    dt = cfg.step_size(hfield.geometry)
    current = hfield
    step = 0
    for t, h in time_steps(t0, t1, dt):
        try:
            current = gals_step(current, vfield, t, h, cfg, timer)
        except NonFiniteError as e:
            raise NonFiniteError(str(e), step=step + 1) from e
        step += 1
        if on_step is not None:
            on_step(step, t + h, current)
    logger.info(f"GALS 完成: {step} 步, N_g={hfield.geometry.cells}, t={t0}→{t1}")
    return current
