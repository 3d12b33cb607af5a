#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
集合函數模組 - 初始集合 S0、拉回求值、等值線擷取與誤差指標

功能：
1. 集合函數：圓 / 球 / 直線 / 帶狀 level set、Mandelbrot、遮罩直線、馬賽克、組合集合
2. 拉回求值 S(x, t) = S0(χ0(χ(x)))，一次映射求值可對應多個 S0
3. 等值線擷取：2D marching squares (contourpy)、3D marching cubes (PyMCubes)
4. 誤差指標：L2、Hausdorff 距離、包圍面積 / 體積相對誤差
5. 被動示蹤粒子軌跡
6. 輸出：折線文字檔、三角形文字檔、PGM (P5) 影像、指標 CSV
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import contourpy
import mcubes
import numpy as np
import pandas as pd
from pydantic import BaseModel
from scipy.spatial.distance import directed_hausdorff

from cm_core import MapState, global_map_eval
from flow import VelocityField, rk3_forward
from gals import time_steps

logger = logging.getLogger(__name__)

SetLike = Callable[[np.ndarray], np.ndarray]

METRICS_COLUMNS = ["label", "t", "resolution", "l2", "hausdorff", "area_reference", "area_computed", "area_error"]


def _points(x) -> Tuple[np.ndarray, bool]:
    pts = np.asarray(x, dtype=float)
    return np.atleast_2d(pts), pts.ndim == 1


# ============================================
# 集合函數
# ============================================

class SetFunction:
    """
    初始集合 S0，可在任意點求值

    子類別實作 values(points) -> (m,)；level set 類為帶號距離（內部為負）。
    """

    kind = "set"
    is_level_set = False

    def values(self, pts: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        pts, single = _points(x)
        out = self.values(pts)
        return float(out[0]) if single else out


@dataclass
class CircleLevelSet(SetFunction):
    center: Tuple[float, ...] = (0.5, 0.75)
    radius: float = 0.15

    kind = "circle"
    is_level_set = True

    def values(self, pts):
        return np.linalg.norm(pts - np.asarray(self.center, dtype=float), axis=1) - self.radius


@dataclass
class SphereLevelSet(CircleLevelSet):
    center: Tuple[float, ...] = (0.35, 0.35, 0.35)
    radius: float = 0.15

    kind = "sphere"


@dataclass
class LineLevelSet(SetFunction):
    """通過 point、法向量 normal 的直線（3D 為平面）帶號距離"""

    point: Tuple[float, ...] = (0.5, 0.5)
    normal: Tuple[float, ...] = (1.0, 0.0)

    kind = "line"
    is_level_set = True

    def values(self, pts):
        n = np.asarray(self.normal, dtype=float)
        return (pts - np.asarray(self.point, dtype=float)) @ (n / np.linalg.norm(n))


@dataclass
class Mandelbrot(SetFunction):
    """
    Mandelbrot 集合的平滑逃逸值

    單位方塊仿射映到 window；有界點為 1，其餘為正規化的平滑逃逸次數，截在 [0, 1]。
    """

    window: Tuple[float, float, float, float] = (-2.2, 0.8, -1.5, 1.5)
    max_iter: int = 300
    escape_radius: float = 2.0

    kind = "mandelbrot"

    def to_complex(self, pts: np.ndarray) -> np.ndarray:
        re_lo, re_hi, im_lo, im_hi = self.window
        return (re_lo + (re_hi - re_lo) * pts[:, 0]) + 1j * (im_lo + (im_hi - im_lo) * pts[:, 1])

    def values(self, pts):
        c = self.to_complex(pts)
        z = np.zeros_like(c)
        escaped_at = np.full(len(c), -1, dtype=int)
        modulus = np.zeros(len(c))
        active = np.ones(len(c), dtype=bool)
        for n in range(self.max_iter):
            z[active] = z[active] ** 2 + c[active]
            out = active & (np.abs(z) > self.escape_radius)
            escaped_at[out] = n
            modulus[out] = np.abs(z[out])
            active &= ~out
            if not active.any():
                break

        result = np.ones(len(c))
        esc = escaped_at >= 0
        if esc.any():
            smooth = escaped_at[esc] + 1 - np.log(np.log(modulus[esc])) / math.log(2.0)
            result[esc] = np.clip(smooth / self.max_iter, 0.0, 1.0)
        return result


@dataclass
class MaskedLine(SetFunction):
    """
    遮罩內的直線（開放曲線）

    值 = max(mask, |line| − thickness)，內部 ⇔ mask < 0 且 |line| < thickness。
    """

    line: LineLevelSet = field(default_factory=LineLevelSet)
    mask: SetFunction = field(default_factory=CircleLevelSet)
    thickness: float = 1.5 / 1024

    kind = "masked_line"

    def values(self, pts):
        return self.combine(self.line.values(pts), self.mask.values(pts))

    def combine(self, line_values: np.ndarray, mask_values: np.ndarray) -> np.ndarray:
        return np.maximum(mask_values, np.abs(line_values) - self.thickness)


@dataclass
class Mosaic(SetFunction):
    """
    kx × ky 整數相位拼貼（週期區域）

    值 = ix + kx·iy；stagger 時奇數列沿 x 偏移半格，產生三相交點。
    """

    kx: int = 3
    ky: int = 3
    stagger: bool = False
    lo: Tuple[float, float] = (0.0, 0.0)
    side: float = 1.0

    kind = "mosaic"

    def values(self, pts):
        u = np.mod((pts[:, :2] - np.asarray(self.lo)) / self.side, 1.0)
        iy = np.minimum(np.floor(u[:, 1] * self.ky), self.ky - 1).astype(int)
        shift = np.where(self.stagger & (iy % 2 == 1), 0.5 / self.kx, 0.0)
        ix = np.minimum(np.floor(np.mod(u[:, 0] + shift, 1.0) * self.kx), self.kx - 1).astype(int)
        return (ix + self.kx * iy).astype(float)


@dataclass
class Composite(SetFunction):
    """多個 level set 的聯集（min）或交集（max）"""

    parts: List[SetFunction] = field(default_factory=list)
    mode: str = "union"

    kind = "composite"
    is_level_set = True

    def __post_init__(self):
        if self.mode not in ("union", "intersection"):
            raise ValueError(f"未知的組合方式: {self.mode}")
        if not self.parts:
            raise ValueError("組合集合至少需要一個成員")

    def values(self, pts):
        stacked = np.stack([p.values(pts) for p in self.parts])
        return stacked.min(axis=0) if self.mode == "union" else stacked.max(axis=0)


def open_curve_sets(center=(0.5, 0.5), arm: float = 0.2, thickness: float = 1.5 / 1024) -> List[SetFunction]:
    """
    三條在 center 交會的開放線段（各自由直線與圓形遮罩定義）加一個閉合圓
    """
    sets: List[SetFunction] = []
    c = np.asarray(center, dtype=float)
    for angle in (90.0, 210.0, 330.0):
        theta = math.radians(angle)
        direction = np.array([math.cos(theta), math.sin(theta)])
        normal = (-direction[1], direction[0])
        mid = c + 0.5 * arm * direction
        sets.append(
            MaskedLine(
                line=LineLevelSet(point=tuple(c), normal=normal),
                mask=CircleLevelSet(center=tuple(mid), radius=0.5 * arm),
                thickness=thickness,
            )
        )
    sets.append(CircleLevelSet(center=(0.5, 0.25), radius=0.1))
    return sets


def eval_set(s0: SetLike, x):
    return s0(x)


def advected_set_eval(s0: Union[SetLike, Sequence[SetLike]], state: MapState, x):
    """
    S0(χ0(χ(x)))

    s0 為序列時只做一次映射求值，回傳各集合的值（list）。
    """
    mapped = global_map_eval(state, x)
    if isinstance(s0, (list, tuple)):
        return [s(mapped) for s in s0]
    return s0(mapped)


# ============================================
# 等值線
# ============================================

@dataclass
class ContourSet:
    """
    2D：polylines 為 (n, 2) 點列；3D：vertices + triangles 三角形網格
    """

    dims: int
    resolution: int
    polylines: List[np.ndarray] = field(default_factory=list)
    vertices: Optional[np.ndarray] = None
    triangles: Optional[np.ndarray] = None

    @property
    def empty(self) -> bool:
        if self.dims == 2:
            return not any(len(p) for p in self.polylines)
        return self.vertices is None or len(self.vertices) == 0

    def points(self) -> np.ndarray:
        """所有頂點 (k, d)"""
        if self.dims == 2:
            if self.empty:
                return np.empty((0, 2))
            return np.vstack([p for p in self.polylines if len(p)])
        return self.vertices if self.vertices is not None else np.empty((0, 3))

    def closed(self) -> bool:
        """所有折線首尾相接（可計算包圍面積）"""
        return all(len(p) > 2 and np.allclose(p[0], p[-1]) for p in self.polylines)


def sample_axes(resolution: int, dims: int, lo=0.0, hi=1.0) -> List[np.ndarray]:
    return [np.linspace(lo, hi, resolution) for _ in range(dims)]


def sample_grid(fn: SetLike, resolution: int, dims: int, lo=0.0, hi=1.0) -> np.ndarray:
    """在 R^d 取樣網格（含端點）上求值，回傳形狀 (R,)*d，索引順序 ij"""
    if resolution < 2:
        raise ValueError(f"取樣解析度必須 ≥ 2: {resolution}")
    axes = sample_axes(resolution, dims, lo, hi)
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    return np.asarray(fn(pts), dtype=float).reshape((resolution,) * dims)


def contour_from_samples(values: np.ndarray, iso: float = 0.0, lo=0.0, hi=1.0) -> ContourSet:
    dims = values.ndim
    resolution = values.shape[0]
    if dims == 2:
        xs, ys = sample_axes(resolution, 2, lo, hi)
        gen = contourpy.contour_generator(xs, ys, values.T, line_type=contourpy.LineType.Separate)
        lines = [np.asarray(line, dtype=float) for line in gen.lines(iso)]
        return ContourSet(dims=2, resolution=resolution, polylines=lines)

    if dims != 3:
        raise ValueError(f"只支援 2D / 3D 取樣: ndim={dims}")
    if values.min() > iso or values.max() < iso:
        return ContourSet(dims=3, resolution=resolution, vertices=np.empty((0, 3)), triangles=np.empty((0, 3), dtype=int))
    vertices, triangles = mcubes.marching_cubes(values, iso)
    spacing = (hi - lo) / (resolution - 1)
    return ContourSet(
        dims=3,
        resolution=resolution,
        vertices=lo + np.asarray(vertices, dtype=float) * spacing,
        triangles=np.asarray(triangles, dtype=int),
    )


def extract_contour(fn: SetLike, iso: float = 0.0, resolution: int = 512, dims: int = 2, lo=0.0, hi=1.0) -> ContourSet:
    """在 R^d 取樣網格上以線性邊內插擷取 S = iso 的等值線 / 等值面"""
    contour = contour_from_samples(sample_grid(fn, resolution, dims, lo, hi), iso, lo, hi)
    logger.debug(f"等值線擷取完成: R={resolution}, 頂點數 {len(contour.points())}")
    return contour


# ============================================
# 指標
# ============================================

class SetMetrics(BaseModel):
    label: str = ""
    t: float = 0.0
    resolution: int
    l2: float
    hausdorff: Optional[float] = None
    area_reference: Optional[float] = None
    area_computed: Optional[float] = None
    area_error: Optional[float] = None


def _polygon_area(polylines: List[np.ndarray]) -> float:
    """鞋帶公式；逆時針與順時針環的有號面積相加（孔洞自動扣除）"""
    total = 0.0
    for p in polylines:
        x, y = p[:, 0], p[:, 1]
        total += 0.5 * float(np.dot(x[:-1], y[1:]) - np.dot(x[1:], y[:-1]))
    return abs(total)


def _mesh_volume(vertices: np.ndarray, triangles: np.ndarray) -> float:
    v0, v1, v2 = (vertices[triangles[:, k]] for k in range(3))
    return abs(float(np.einsum("ij,ij->i", v0, np.cross(v1, v2)).sum()) / 6.0)


def enclosed_measure(contour: ContourSet, values: np.ndarray, iso: float = 0.0, lo=0.0, hi=1.0) -> float:
    """
    等值線包圍的面積（2D）或體積（3D）

    2D 折線全部閉合時用鞋帶公式，3D 用散度定理；否則退回取樣點計數。
    """
    if contour.dims == 2 and not contour.empty and contour.closed():
        return _polygon_area(contour.polylines)
    if contour.dims == 3 and not contour.empty and _boundary_free(values, iso):
        return _mesh_volume(contour.vertices, contour.triangles)
    cell = ((hi - lo) / (values.shape[0] - 1)) ** values.ndim
    return float(np.count_nonzero(values < iso)) * cell


def _boundary_free(values: np.ndarray, iso: float) -> bool:
    """取樣區域邊界上沒有內部點（表面閉合）"""
    for axis in range(values.ndim):
        for index in (0, -1):
            if np.any(np.take(values, index, axis=axis) < iso):
                return False
    return True


def hausdorff_distance(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    if len(a) == 0 or len(b) == 0:
        return None
    return max(directed_hausdorff(a, b)[0], directed_hausdorff(b, a)[0])


def set_metrics(
    reference: SetLike,
    computed: SetLike,
    resolution: int = 512,
    dims: int = 2,
    iso: float = 0.0,
    label: str = "",
    t: float = 0.0,
) -> SetMetrics:
    """
    參考集合與計算結果的比較

    level set 類：另外計算零等值線的 Hausdorff 距離與包圍面積 / 體積相對誤差；
    任一側等值線為空時 Hausdorff 記為 None。
    """
    ref_values = sample_grid(reference, resolution, dims)
    cmp_values = sample_grid(computed, resolution, dims)
    l2 = float(np.sqrt(np.mean((cmp_values - ref_values) ** 2)))
    metrics = SetMetrics(label=label, t=t, resolution=resolution, l2=l2)
    if not getattr(reference, "is_level_set", True):
        return metrics

    ref_contour = contour_from_samples(ref_values, iso)
    cmp_contour = contour_from_samples(cmp_values, iso)
    metrics.hausdorff = hausdorff_distance(ref_contour.points(), cmp_contour.points())
    if metrics.hausdorff is None:
        logger.warning(f"等值線為空，Hausdorff 距離略過 ({label or 'metrics'})")
    metrics.area_reference = enclosed_measure(ref_contour, ref_values, iso)
    metrics.area_computed = enclosed_measure(cmp_contour, cmp_values, iso)
    if metrics.area_reference > 0:
        metrics.area_error = abs(metrics.area_computed - metrics.area_reference) / metrics.area_reference
    return metrics


# ============================================
# 被動示蹤粒子
# ============================================

def track_tracers(points, vfield: VelocityField, t0: float, t1: float, dt: float) -> np.ndarray:
    """
    正向 RK3 軌跡

    Returns:
        (steps + 1, m, d)，第 0 列為起點
    """
    if dt <= 0:
        raise ValueError(f"dt 必須為正: {dt}")
    x = np.atleast_2d(np.asarray(points, dtype=float))
    path = [x]
    for t, h in time_steps(t0, t1, dt):
        x = rk3_forward(vfield, x, t, h)
        path.append(x)
    return np.stack(path)


# ============================================
# 輸出
# ============================================

def write_polylines(contour: ContourSet, path: Union[str, Path]) -> Path:
    """每行一個頂點，折線之間空一行"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# polylines resolution={contour.resolution} count={len(contour.polylines)}\n")
        for line in contour.polylines:
            for vertex in line:
                fh.write(" ".join(f"{v:.10g}" for v in vertex) + "\n")
            fh.write("\n")
    return path


def write_triangles(contour: ContourSet, path: Union[str, Path]) -> Path:
    """頂點列後接三角形索引列（v / f 前綴）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# triangles resolution={contour.resolution}\n")
        for v in contour.points():
            fh.write(f"v {v[0]:.10g} {v[1]:.10g} {v[2]:.10g}\n")
        if contour.triangles is not None:
            for tri in contour.triangles:
                fh.write(f"f {tri[0]} {tri[1]} {tri[2]}\n")
    return path


def write_contour(contour: ContourSet, path: Union[str, Path]) -> Path:
    return write_polylines(contour, path) if contour.dims == 2 else write_triangles(contour, path)


def write_pgm(values: np.ndarray, path: Union[str, Path]) -> Path:
    """2D 取樣值 min-max 縮放為 8-bit 灰階，第一列為 y 最大處"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    image = np.asarray(values, dtype=float).T[::-1]
    lo, hi = float(image.min()), float(image.max())
    scaled = np.zeros_like(image) if hi <= lo else (image - lo) / (hi - lo)
    pixels = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    return path


def write_metrics_csv(rows: Sequence[SetMetrics], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([r.model_dump() for r in rows], columns=METRICS_COLUMNS)
    frame.to_csv(path, index=False)
    return path
