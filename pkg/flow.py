#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
速度場與特徵線追蹤模組

功能：
1. 解析速度場：Swirl2D、Deform3D、MandelField2D、Mosaic2D、自訂 callable
2. RK3 (Kutta) 反向追蹤 footpoint（GALS 用）
3. RK3 正向推進粒子（誤差估計用、被動示蹤粒子用）
4. 粒子集合的建立、推進與重設
"""

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Optional

import numpy as np

from hermite import GridGeometry

logger = logging.getLogger(__name__)

PI = np.pi

VelocityFn = Callable[[np.ndarray, float], np.ndarray]


class FlowKind(str, Enum):
    SWIRL_2D = "swirl2d"
    DEFORM_3D = "deform3d"
    MANDEL_FIELD_2D = "mandelfield2d"
    MOSAIC_2D = "mosaic2d"
    CUSTOM = "custom"


# ============================================
# 速度場公式（x 形狀 (m, d)，回傳 (m, d)）
# ============================================

def _swirl_2d(x: np.ndarray, t: float, period: float) -> np.ndarray:
    c = np.cos(PI * t / period)
    px, py = x[:, 0], x[:, 1]
    u = c * np.sin(PI * px) ** 2 * np.sin(2 * PI * py)
    v = -c * np.sin(PI * py) ** 2 * np.sin(2 * PI * px)
    return np.stack([u, v], axis=-1)


def _deform_3d(x: np.ndarray, t: float, period: float) -> np.ndarray:
    c = np.cos(PI * t / period)
    px, py, pz = x[:, 0], x[:, 1], x[:, 2]
    u = 2 * c * np.sin(PI * px) ** 2 * np.sin(2 * PI * py) * np.sin(2 * PI * pz)
    v = -c * np.sin(2 * PI * px) * np.sin(PI * py) ** 2 * np.sin(2 * PI * pz)
    w = -c * np.sin(2 * PI * px) * np.sin(2 * PI * py) * np.sin(PI * pz) ** 2
    return np.stack([u, v, w], axis=-1)


def mandel_weights(x: np.ndarray):
    """左右兩區的平滑權重 (L, R)"""
    px, py = x[:, 0], x[:, 1]
    right = np.sin(PI * (4 * px ** 2 - 5 * px ** 3 + 2 * px ** 4)) * np.sin(PI * py)
    left = (
        np.sin(PI * (1 - px) ** 3)
        * np.sin(PI * py)
        * np.sin(1.5 * PI * px)
        * np.sin(2 * PI * py) ** 2
    )
    return left, right


def _mandel_field_2d(x: np.ndarray, t: float, period: float) -> np.ndarray:
    c = np.cos(PI * t / period)
    px, py = x[:, 0], x[:, 1]
    left, right = mandel_weights(x)
    u = c * (-0.25 * left * np.sin(1.5 * PI * px) ** 2 * np.sin(4 * PI * py) + 0.75 * right * (px - 0.5))
    v = c * (0.25 * left * np.sin(2 * PI * py) ** 2 * np.sin(3 * PI * px) + 0.75 * right * (py - 0.5))
    return np.stack([u, v], axis=-1)


def _mosaic_2d(x: np.ndarray, t: float, period: float) -> np.ndarray:
    c = np.cos(PI * t / period)
    px, py = x[:, 0], x[:, 1]
    u = c * np.cos(2 * PI * py + 2 * np.sin(2 * c ** 2))
    v = c * np.sin(2 * PI * px + 2 * np.sin(c ** 2))
    return np.stack([u, v], axis=-1)


_FORMULAS = {
    FlowKind.SWIRL_2D: (_swirl_2d, 2),
    FlowKind.DEFORM_3D: (_deform_3d, 3),
    FlowKind.MANDEL_FIELD_2D: (_mandel_field_2d, 2),
    FlowKind.MOSAIC_2D: (_mosaic_2d, 2),
}


@dataclass
class VelocityField:
    """
    時間相依的解析速度場 v(x, t)

    Args:
        kind: 速度場種類
        period: 週期參數 A（cos(πt/A) 調變）
        dims: 維度
        fn: kind=CUSTOM 時的 callable，簽名 fn(x: (m, d), t) -> (m, d)
        params: 其他描述用常數（寫入設定回顯）
    """

    kind: FlowKind
    period: float = 1.0
    dims: int = 2
    fn: Optional[VelocityFn] = None
    params: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        self.kind = FlowKind(self.kind)
        if self.kind is FlowKind.CUSTOM:
            if self.fn is None:
                raise ValueError("自訂速度場需要提供 fn")
        else:
            self.dims = _FORMULAS[self.kind][1]
            if self.period <= 0:
                raise ValueError(f"週期 A 必須為正: {self.period}")

    def __call__(self, x: np.ndarray, t: float) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind is FlowKind.CUSTOM:
            return np.asarray(self.fn(pts, t), dtype=float).reshape(pts.shape)
        formula, _ = _FORMULAS[self.kind]
        return formula(pts, float(t), self.period)


def velocity(vfield: VelocityField, x, t: float) -> np.ndarray:
    """單點或多點速度；單點輸入回傳 (d,)"""
    pts = np.asarray(x, dtype=float)
    out = vfield(pts, t)
    return out[0] if pts.ndim == 1 else out


# ----------------------------------------
# 工廠函式
# ----------------------------------------

def swirl_2d(period: float = 16.0) -> VelocityField:
    return VelocityField(FlowKind.SWIRL_2D, period=period)


def deform_3d(period: float = 2.0) -> VelocityField:
    return VelocityField(FlowKind.DEFORM_3D, period=period)


def mandel_field_2d(period: float = 16.0) -> VelocityField:
    return VelocityField(FlowKind.MANDEL_FIELD_2D, period=period)


def mosaic_2d(period: float = 2.0) -> VelocityField:
    return VelocityField(FlowKind.MOSAIC_2D, period=period)


def custom_field(fn: VelocityFn, dims: int = 2, **params: float) -> VelocityField:
    return VelocityField(FlowKind.CUSTOM, dims=dims, fn=fn, params=params)


def constant_field(velocity_vector, **params: float) -> VelocityField:
    vec = np.asarray(velocity_vector, dtype=float)
    return custom_field(lambda x, t: np.broadcast_to(vec, x.shape), dims=len(vec), **params)


def rigid_rotation(center=(0.5, 0.5), omega: float = 1.0) -> VelocityField:
    """繞 center 的剛體旋轉 v = ω (−(y−c_y), x−c_x)"""
    cx, cy = center

    def fn(x, t):
        return omega * np.stack([-(x[:, 1] - cy), x[:, 0] - cx], axis=-1)

    return custom_field(fn, dims=2, omega=omega)


# ============================================
# RK3 (Kutta) 積分
# ============================================

def backward_displacement(vfield: VelocityField, x: np.ndarray, t: float, dt: float) -> np.ndarray:
    """
    反向 RK3 位移：footpoint − x

    k1 = v(x, t+dt)
    k2 = v(x − dt/2·k1, t + dt/2)
    k3 = v(x − dt(2k2 − k1), t)
    footpoint = x − dt/6 (k1 + 4k2 + k3)
    """
    k1 = vfield(x, t + dt)
    k2 = vfield(x - 0.5 * dt * k1, t + 0.5 * dt)
    k3 = vfield(x - dt * (2.0 * k2 - k1), t)
    return -(dt / 6.0) * (k1 + 4.0 * k2 + k3)


def trace_backward_rk3(vfield: VelocityField, x, t: float, dt: float) -> np.ndarray:
    """抵達 x（時間 t+dt）的特徵線在時間 t 的位置"""
    if dt <= 0:
        raise ValueError(f"dt 必須為正: {dt}")
    pts = np.asarray(x, dtype=float)
    flat = np.atleast_2d(pts)
    foot = flat + backward_displacement(vfield, flat, t, dt)
    return foot[0] if pts.ndim == 1 else foot


def rk3_forward(vfield: VelocityField, x: np.ndarray, t: float, dt: float) -> np.ndarray:
    """正向一步 RK3（與反向追蹤同一組 Butcher 係數）"""
    k1 = vfield(x, t)
    k2 = vfield(x + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = vfield(x + dt * (2.0 * k2 - k1), t + dt)
    return x + (dt / 6.0) * (k1 + 4.0 * k2 + k3)


# ============================================
# 粒子
# ============================================

class ParticleSet:
    """
    誤差估計用的 Lagrangian 粒子

    位置不做週期折返，χ(x_p) 與 x_p⁰ 的差直接就是表示誤差。
    """

    def __init__(self, initial_positions: np.ndarray, positions: Optional[np.ndarray] = None):
        initial = np.array(initial_positions, dtype=float, ndmin=2)
        initial.flags.writeable = False
        current = initial.copy() if positions is None else np.array(positions, dtype=float, ndmin=2)
        if current.shape != initial.shape:
            raise ValueError(f"粒子位置形狀 {current.shape} 與初始位置 {initial.shape} 不符")
        self.initial_positions = initial
        self.positions = current

    @property
    def count(self) -> int:
        return len(self.initial_positions)

    @property
    def dims(self) -> int:
        return self.initial_positions.shape[1]

    def __len__(self) -> int:
        return self.count


def seed_particles(geometry: GridGeometry, gamma: int = 1) -> ParticleSet:
    """
    每個粗網格格子放 γ 個粒子

    γ = 1 時放在格子中心；γ > 1 時放在 k^d 個子格中心的前 γ 個（k = ⌈γ^{1/d}⌉）。
    """
    if gamma < 1:
        raise ValueError(f"每格粒子數必須 ≥ 1: {gamma}")
    dims = geometry.dims
    k = 1
    while k ** dims < gamma:
        k += 1
    sub = (np.arange(k) + 0.5) / k
    offsets = np.stack(np.meshgrid(*([sub] * dims), indexing="ij"), axis=-1).reshape(-1, dims)[:gamma]
    corners = geometry.cell_centers() - 0.5 * geometry.dx
    points = (corners[:, None, :] + offsets[None, :, :] * geometry.dx).reshape(-1, dims)
    logger.debug(f"已佈置 {len(points)} 個誤差粒子 (γ={gamma})")
    return ParticleSet(points)


def advance_particles(particles: ParticleSet, vfield: VelocityField, t: float, dt: float) -> ParticleSet:
    """dx/dt = v(x, t) 正向一步 RK3"""
    if dt <= 0:
        raise ValueError(f"dt 必須為正: {dt}")
    moved = rk3_forward(vfield, particles.positions, t, dt)
    return ParticleSet(particles.initial_positions, moved)


def reset_particles(particles: ParticleSet) -> ParticleSet:
    """粒子回到初始位置（每次 remap 時呼叫）"""
    return ParticleSet(particles.initial_positions)
