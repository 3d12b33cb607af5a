#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
Hermite 插值網格模組 - d 維張量積三次 Hermite 插值 (d ∈ {2, 3})

功能：
1. GridGeometry：規則網格幾何（Clamped / Periodic 邊界）
2. HermiteField：每節點每分量 2^d 個係數（值、一階偏導、混合偏導）
3. 解析求值與任意階導數（對基底微分，不用有限差分）
4. 跨解析度重取樣、由函數填入節點資料
5. MapField：以位移場儲存的映射 χ(x) = x + δ(x)
6. 鏈鎖律組合節點資料（f∘X 的節點 jet）
7. 純文字 dump / load 格式

節點係數順序（每個分量一個連續區塊）：
    2D: f, f_x, f_y, f_xy
    3D: f, f_x, f_y, f_z, f_xy, f_xz, f_yz, f_xyz
導數係數以區域單位儲存（不乘格寬）。
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from itertools import product
from pathlib import Path
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

# 每批次求值的點數上限（控制暫存陣列大小）
EVAL_CHUNK = 16384

# fill_from_function 的有限差分步長（相對於格寬）
FD_STEP_REL = 1e-4

AXIS_NAMES = "xyz"

Order = Tuple[int, ...]


# ============================================
# 例外
# ============================================

class NonFiniteError(ValueError):
    """輸入點或計算結果含 NaN / Inf"""

    def __init__(self, message: str, step: Optional[int] = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class GridMismatchError(ValueError):
    """兩個網格的區域或邊界型態不一致"""


class Boundary(str, Enum):
    CLAMPED = "clamped"
    PERIODIC = "periodic"


# ============================================
# 係數排列
# ============================================

def mask_axes(mask: int) -> Tuple[int, ...]:
    """位元遮罩 → 軸編號"""
    return tuple(a for a in range(3) if mask >> a & 1)


def coefficient_masks(dims: int) -> List[int]:
    """節點係數順序：先依導數階數，再依軸序"""
    return sorted(range(1 << dims), key=lambda m: (bin(m).count("1"), mask_axes(m)))


def coefficient_labels(dims: int) -> List[str]:
    labels = []
    for mask in coefficient_masks(dims):
        axes = mask_axes(mask)
        labels.append("f" if not axes else "f_" + "".join(AXIS_NAMES[a] for a in axes))
    return labels


def mask_order(mask: int, dims: int) -> Order:
    return tuple(mask >> a & 1 for a in range(dims))


def outer_orders(dims: int) -> List[Order]:
    """鏈鎖律需要的外層導數：每個總階數 ≤ dims 的多重指標"""
    return [o for o in product(range(dims + 1), repeat=dims) if sum(o) <= dims]


# ============================================
# 網格幾何
# ============================================

@dataclass(frozen=True)
class GridGeometry:
    """
    規則網格

    Args:
        dims: 維度 (2 或 3)
        cells: 每軸格數 N
        lo / hi: 區域的下界與上界（預設單位方塊）
        boundary: Clamped 存 N+1 個節點/軸，Periodic 存 N 個（節點 N ≡ 節點 0）
    """

    dims: int
    cells: int
    lo: Optional[Tuple[float, ...]] = None
    hi: Optional[Tuple[float, ...]] = None
    boundary: Boundary = Boundary.CLAMPED

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ValueError(f"只支援 2D / 3D 網格: dims={self.dims}")
        if int(self.cells) != self.cells or self.cells < 1:
            raise ValueError(f"格數必須為正整數: {self.cells}")
        lo = tuple(float(v) for v in (self.lo if self.lo is not None else (0.0,) * self.dims))
        hi = tuple(float(v) for v in (self.hi if self.hi is not None else (1.0,) * self.dims))
        if len(lo) != self.dims or len(hi) != self.dims:
            raise ValueError("區域邊界的維度與 dims 不符")
        sides = np.subtract(hi, lo)
        if np.any(sides <= 0):
            raise ValueError(f"區域邊長必須為正: lo={lo}, hi={hi}")
        if not np.allclose(sides, sides[0], rtol=1e-12, atol=0.0):
            raise ValueError(f"各軸邊長必須相同（格寬一致）: {tuple(sides)}")
        object.__setattr__(self, "cells", int(self.cells))
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        object.__setattr__(self, "boundary", Boundary(self.boundary))

    @property
    def side(self) -> float:
        return self.hi[0] - self.lo[0]

    @property
    def dx(self) -> float:
        return self.side / self.cells

    @property
    def periodic(self) -> bool:
        return self.boundary is Boundary.PERIODIC

    @property
    def nodes_per_axis(self) -> int:
        return self.cells if self.periodic else self.cells + 1

    @property
    def node_shape(self) -> Tuple[int, ...]:
        return (self.nodes_per_axis,) * self.dims

    @property
    def node_count(self) -> int:
        return self.nodes_per_axis ** self.dims

    def with_cells(self, cells: int) -> "GridGeometry":
        return replace(self, cells=int(cells))

    def same_domain(self, other: "GridGeometry") -> bool:
        return (
            self.dims == other.dims
            and self.boundary is other.boundary
            and np.allclose(self.lo, other.lo, rtol=0.0, atol=1e-14)
            and np.allclose(self.hi, other.hi, rtol=0.0, atol=1e-14)
        )

    def axis_coordinates(self) -> np.ndarray:
        return self.lo[0] + self.dx * np.arange(self.nodes_per_axis)

    def node_points(self) -> np.ndarray:
        """所有節點座標，形狀 (node_count, d)，軸 0 為最外層索引"""
        axes = [lo + self.dx * np.arange(self.nodes_per_axis) for lo in self.lo]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def cell_centers(self) -> np.ndarray:
        axes = [lo + self.dx * (np.arange(self.cells) + 0.5) for lo in self.lo]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def contains(self, points: np.ndarray, tol: float = 0.0) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        return np.all((pts >= np.asarray(self.lo) - tol) & (pts <= np.asarray(self.hi) + tol), axis=-1)

    def clamp(self, points: np.ndarray) -> np.ndarray:
        return np.clip(points, self.lo, self.hi)


# ============================================
# 一維 Hermite 基底
# ============================================

def _hermite_basis(t: np.ndarray, order: int) -> Tuple[np.ndarray, ...]:
    """(h00, h10, h01, h11) 對 t 的 order 階導數"""
    if order == 0:
        t2 = t * t
        t3 = t2 * t
        return 2 * t3 - 3 * t2 + 1, t3 - 2 * t2 + t, -2 * t3 + 3 * t2, t3 - t2
    if order == 1:
        t2 = t * t
        return 6 * t2 - 6 * t, 3 * t2 - 4 * t + 1, -6 * t2 + 6 * t, 3 * t2 - 2 * t
    if order == 2:
        return 12 * t - 6, 6 * t - 4, -12 * t + 6, 6 * t - 2
    one = np.ones_like(t)
    if order == 3:
        return 12 * one, 6 * one, -12 * one, 6 * one
    zero = np.zeros_like(t)
    return zero, zero, zero, zero


def _axis_factor(t: np.ndarray, order: int, dx: float) -> np.ndarray:
    """單軸權重，形狀 (m, 2 角點, 2 係數種類)，已換算為區域單位"""
    h00, h10, h01, h11 = _hermite_basis(t, order)
    factor = np.empty(t.shape + (2, 2))
    factor[:, 0, 0] = h00
    factor[:, 0, 1] = h10 * dx
    factor[:, 1, 0] = h01
    factor[:, 1, 1] = h11 * dx
    if order:
        factor /= dx ** order
    return factor


def _as_points(x, dims: int) -> Tuple[np.ndarray, bool]:
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != dims:
        raise ValueError(f"點的維度 {pts.shape[-1]} 與網格維度 {dims} 不符")
    if not np.all(np.isfinite(pts)):
        raise NonFiniteError("求值點含 NaN 或 Inf")
    return pts, single


# ============================================
# Hermite 場
# ============================================

class HermiteField:
    """
    規則網格上的張量積三次 Hermite 插值場

    data 形狀為 node_shape + (components, 2^d)，建構後視為唯讀。
    """

    def __init__(self, geometry: GridGeometry, data: np.ndarray):
        n_coeffs = 1 << geometry.dims
        data = np.array(data, dtype=float, order="C")
        if data.shape[:-2] != geometry.node_shape or data.shape[-1] != n_coeffs:
            raise ValueError(
                f"節點資料形狀 {data.shape} 與網格 {geometry.node_shape} × (分量, {n_coeffs}) 不符"
            )
        self.geometry = geometry
        self.data = data
        self.data.flags.writeable = False

        dims = geometry.dims
        masks = coefficient_masks(dims)
        self._corner_bits = np.array([[c >> a & 1 for a in range(dims)] for c in range(n_coeffs)])
        self._kind_bits = np.array([[m >> a & 1 for a in range(dims)] for m in masks])

    @classmethod
    def zeros(cls, geometry: GridGeometry, components: int = 1) -> "HermiteField":
        shape = geometry.node_shape + (components, 1 << geometry.dims)
        return cls(geometry, np.zeros(shape))

    @property
    def dims(self) -> int:
        return self.geometry.dims

    @property
    def components(self) -> int:
        return self.data.shape[-2]

    @property
    def n_coeffs(self) -> int:
        return self.data.shape[-1]

    def node_block(self) -> np.ndarray:
        """節點資料攤平成 (node_count, components, 2^d)"""
        return self.data.reshape(-1, self.components, self.n_coeffs)

    # ----------------------------------------
    # 求值核心
    # ----------------------------------------

    def _locate(self, pts: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """找出每點所在格子的 2^d 角點（攤平索引）與格內座標 t ∈ [0, 1]"""
        g = self.geometry
        offset = pts - np.asarray(g.lo)
        if g.periodic:
            # 先在實體座標上取模，x 與 x + side 落在同一格內座標
            s = np.mod(offset, g.side) / g.dx
        else:
            # 出界的點夾回邊界
            s = np.clip(offset / g.dx, 0.0, g.cells)
        cell = np.minimum(np.floor(s).astype(np.intp), g.cells - 1)
        t = s - cell
        corners = cell[:, None, :] + self._corner_bits[None, :, :]
        if g.periodic:
            corners %= g.cells
        flat = np.ravel_multi_index(tuple(corners[..., a] for a in range(g.dims)), g.node_shape)
        return flat, t

    def derivatives(self, points, orders: Sequence[Order]) -> Dict[Order, np.ndarray]:
        """
        插值函數的偏導數

        Args:
            points: (m, d) 求值點
            orders: 每軸導數階數的 tuple 列表，例如 (1, 0) 為 ∂/∂x

        Returns:
            {order: (m, components)}
        """
        pts, _ = _as_points(points, self.dims)
        orders = [tuple(int(o) for o in order) for order in orders]
        m = len(pts)
        out = {order: np.empty((m, self.components)) for order in orders}
        block = self.node_block()
        dx = self.geometry.dx

        for start in range(0, m, EVAL_CHUNK):
            stop = min(start + EVAL_CHUNK, m)
            flat, t = self._locate(pts[start:stop])
            coeffs = block[flat]
            factors: Dict[Tuple[int, int], np.ndarray] = {}
            for order in orders:
                weight = None
                for a in range(self.dims):
                    key = (a, order[a])
                    if key not in factors:
                        factors[key] = _axis_factor(t[:, a], order[a], dx)
                    w = factors[key][:, self._corner_bits[:, a][:, None], self._kind_bits[:, a][None, :]]
                    weight = w if weight is None else weight * w
                out[order][start:stop] = np.einsum("mck,mcnk->mn", weight, coeffs)
        return out

    def _shape(self, values: np.ndarray, single: bool):
        if self.components == 1:
            values = values[:, 0]
        return values[0] if single else values

    def eval(self, x):
        """插值值；純量場回傳 (m,)，向量場回傳 (m, components)，單點則去掉第一維"""
        pts, single = _as_points(x, self.dims)
        zero = (0,) * self.dims
        return self._shape(self.derivatives(pts, [zero])[zero], single)

    def eval_with_gradient(self, x):
        """
        值與解析梯度

        Returns:
            (value, gradient)；純量場梯度形狀 (m, d)，向量場為 Jacobian (m, components, d)
        """
        pts, single = _as_points(x, self.dims)
        dims = self.dims
        zero = (0,) * dims
        units = [tuple(int(a == b) for b in range(dims)) for a in range(dims)]
        result = self.derivatives(pts, [zero] + units)
        grad = np.stack([result[u] for u in units], axis=-1)
        if self.components == 1:
            grad = grad[:, 0, :]
        return self._shape(result[zero], single), (grad[0] if single else grad)

    def jet(self, points) -> np.ndarray:
        """在任意點取得與節點資料同排列的係數區塊 (m, components, 2^d)"""
        pts, _ = _as_points(points, self.dims)
        orders = [mask_order(mask, self.dims) for mask in coefficient_masks(self.dims)]
        result = self.derivatives(pts, orders)
        return np.stack([result[o] for o in orders], axis=-1)


# ============================================
# 建構與重取樣
# ============================================

def _columns(values: np.ndarray, m: int) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return values.reshape(m, -1)


def fill_from_function(
    geometry: GridGeometry,
    f: Callable[[np.ndarray], np.ndarray],
    jet: Optional[Callable[[np.ndarray], np.ndarray]] = None,
) -> HermiteField:
    """
    由函數填入節點資料

    Args:
        geometry: 目標網格
        f: (m, d) → (m,) 或 (m, components)
        jet: 可選的解析 jet，(m, d) → (m, components, 2^d)；未提供時導數以中央差分計算，
             步長 h = 1e-4·Δx
    """
    nodes = geometry.node_points()
    m = len(nodes)
    n_coeffs = 1 << geometry.dims
    if jet is not None:
        data = np.asarray(jet(nodes), dtype=float).reshape(m, -1, n_coeffs)
        return HermiteField(geometry, data.reshape(geometry.node_shape + data.shape[1:]))

    values = _columns(f(nodes), m)
    data = np.zeros((m, values.shape[1], n_coeffs))
    data[:, :, 0] = values
    h = FD_STEP_REL * geometry.dx
    for j, mask in enumerate(coefficient_masks(geometry.dims)):
        axes = mask_axes(mask)
        if not axes:
            continue
        acc = np.zeros_like(values)
        for signs in product((1.0, -1.0), repeat=len(axes)):
            shifted = nodes.copy()
            for a, s in zip(axes, signs):
                shifted[:, a] += s * h
            acc += np.prod(signs) * _columns(f(shifted), m)
        data[:, :, j] = acc / (2.0 * h) ** len(axes)
    return HermiteField(geometry, data.reshape(geometry.node_shape + data.shape[1:]))


def resample(source: HermiteField, target: GridGeometry) -> HermiteField:
    """在目標網格節點上以解析 jet 取得全部係數"""
    if not source.geometry.same_domain(target):
        raise GridMismatchError(
            f"重取樣需要相同區域與邊界: {source.geometry} vs {target}"
        )
    data = source.jet(target.node_points())
    return HermiteField(target, data.reshape(target.node_shape + data.shape[1:]))


# ============================================
# 鏈鎖律
# ============================================

def _set_partitions(items: List[int]) -> Iterator[List[List[int]]]:
    if not items:
        yield []
        return
    first, rest = items[0], items[1:]
    for part in _set_partitions(rest):
        yield [[first]] + part
        for i in range(len(part)):
            yield part[:i] + [[first] + part[i]] + part[i + 1:]


def chain_rule_jet(outer: Dict[Order, np.ndarray], inner_jet: np.ndarray, dims: int) -> np.ndarray:
    """
    f∘X 的節點 jet

    ∂_A (f∘X) = Σ_{A 的集合分割 {B_1..B_r}} Σ_{i_1..i_r} f_{i_1..i_r}(X) Π_j ∂_{B_j} X_{i_j}
    只需要 X 對相異軸的混合導數，這正是 2^d 係數所包含的。

    Args:
        outer: outer_orders(dims) 的每個 order → (m, components)，於 X 的值處求得
        inner_jet: X 的 jet (m, d, 2^d)
    """
    masks = coefficient_masks(dims)
    position = {mask: j for j, mask in enumerate(masks)}
    zero = (0,) * dims
    m, components = outer[zero].shape
    out = np.zeros((m, components, len(masks)))
    out[:, :, 0] = outer[zero]
    for j, mask in enumerate(masks[1:], start=1):
        acc = np.zeros((m, components))
        for blocks in _set_partitions(list(mask_axes(mask))):
            block_pos = [position[sum(1 << a for a in block)] for block in blocks]
            for idx in product(range(dims), repeat=len(blocks)):
                order = [0] * dims
                for i in idx:
                    order[i] += 1
                factor = inner_jet[:, idx[0], block_pos[0]]
                for i, bp in zip(idx[1:], block_pos[1:]):
                    factor = factor * inner_jet[:, i, bp]
                acc += outer[tuple(order)] * factor[:, None]
        out[:, :, j] = acc
    return out


def identity_jet(points: np.ndarray) -> np.ndarray:
    """恆等映射的 jet：值為座標、對角一階偏導為 1、混合偏導為 0"""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    dims = pts.shape[1]
    masks = coefficient_masks(dims)
    jet = np.zeros((len(pts), dims, len(masks)))
    jet[:, :, 0] = pts
    for i in range(dims):
        jet[:, i, masks.index(1 << i)] = 1.0
    return jet


# ============================================
# 映射場
# ============================================

class MapField:
    """
    d 分量映射 χ(x) = x + δ(x)，節點上只存位移 δ

    恆等映射即零位移場（Hermite 表示為精確）；Periodic 網格上 δ 為週期函數。
    """

    def __init__(self, displacement: HermiteField):
        if displacement.components != displacement.dims:
            raise ValueError(
                f"映射需要 {displacement.dims} 個分量，收到 {displacement.components}"
            )
        self.displacement = displacement

    @classmethod
    def identity(cls, geometry: GridGeometry) -> "MapField":
        return cls(HermiteField.zeros(geometry, geometry.dims))

    @property
    def geometry(self) -> GridGeometry:
        return self.displacement.geometry

    @property
    def dims(self) -> int:
        return self.geometry.dims

    def is_identity(self) -> bool:
        return not np.any(self.displacement.data)

    def eval(self, x):
        pts, single = _as_points(x, self.dims)
        zero = (0,) * self.dims
        values = pts + self.displacement.derivatives(pts, [zero])[zero]
        return values[0] if single else values

    def eval_with_jacobian(self, x):
        pts, single = _as_points(x, self.dims)
        delta, jac = self.displacement.eval_with_gradient(pts)
        values = pts + delta
        jac = jac + np.eye(self.dims)
        if single:
            return values[0], jac[0]
        return values, jac

    def jet(self, points) -> np.ndarray:
        pts, _ = _as_points(points, self.dims)
        return self.displacement.jet(pts) + identity_jet(pts)

    def node_values(self) -> np.ndarray:
        return self.eval(self.geometry.node_points())


# ============================================
# Dump 格式
# ============================================
#
# 純文字；以 "#" 開頭的表頭行為 key value，其後每節點一列：
#   節點索引 (軸 0 在前)，接著各分量的 2^d 個係數（依 coefficient_labels 順序）

DUMP_MAGIC = "hermite-field v1"


def dump_field(hfield: HermiteField, path: Union[str, Path], representation: str = "field") -> Path:
    """寫出 Hermite 場；representation 為 field 或 displacement（MapField）"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    g = hfield.geometry
    header = [
        DUMP_MAGIC,
        f"representation {representation}",
        f"dims {g.dims}",
        f"cells_per_dim {g.cells}",
        f"boundary {g.boundary.value}",
        f"components {hfield.components}",
        "domain_lo " + " ".join(repr(v) for v in g.lo),
        "domain_hi " + " ".join(repr(v) for v in g.hi),
        "coefficients " + " ".join(coefficient_labels(g.dims)),
    ]
    index = np.indices(g.node_shape).reshape(g.dims, -1).T
    rows = np.hstack([index, hfield.node_block().reshape(g.node_count, -1)])
    with open(path, "w", encoding="utf-8") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        np.savetxt(fh, rows, fmt=["%d"] * g.dims + ["%.17g"] * (rows.shape[1] - g.dims))
    logger.debug(f"已寫出 Hermite 場: {path} ({g.cells}^{g.dims}, {hfield.components} 分量)")
    return path


def _read_header(path: Path) -> Dict[str, str]:
    header: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline().lstrip("#").strip()
        if first != DUMP_MAGIC:
            raise ValueError(f"不是 Hermite dump 檔案: {path}")
        for line in fh:
            if not line.startswith("#"):
                break
            key, _, value = line.lstrip("#").strip().partition(" ")
            header[key] = value
    return header


def load_field(path: Union[str, Path]) -> Tuple[HermiteField, str]:
    """讀回 dump_field 寫出的檔案，回傳 (場, representation)"""
    path = Path(path)
    header = _read_header(path)
    try:
        dims = int(header["dims"])
        geometry = GridGeometry(
            dims=dims,
            cells=int(header["cells_per_dim"]),
            lo=tuple(float(v) for v in header["domain_lo"].split()),
            hi=tuple(float(v) for v in header["domain_hi"].split()),
            boundary=Boundary(header["boundary"]),
        )
        components = int(header["components"])
    except KeyError as e:
        raise ValueError(f"Hermite dump 表頭缺少欄位 {e}: {path}") from e

    rows = np.atleast_2d(np.loadtxt(path, comments="#", dtype=float))
    expected = (geometry.node_count, dims + components * (1 << dims))
    if rows.shape != expected:
        raise ValueError(f"Hermite dump 資料形狀 {rows.shape} 應為 {expected}: {path}")
    data = rows[:, dims:].reshape(geometry.node_shape + (components, 1 << dims))
    return HermiteField(geometry, data), header.get("representation", "field")


def dump_map(chi: MapField, path: Union[str, Path]) -> Path:
    return dump_field(chi.displacement, path, representation="displacement")


def load_map(path: Union[str, Path]) -> MapField:
    hfield, representation = load_field(path)
    if representation != "displacement":
        raise ValueError(f"檔案不是映射位移場 (representation={representation}): {path}")
    return MapField(hfield)
