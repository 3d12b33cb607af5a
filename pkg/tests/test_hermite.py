"""
Hermite 插值網格測試
"""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.polynomial import polynomial as P

from hermite import (
    Boundary,
    GridGeometry,
    GridMismatchError,
    HermiteField,
    MapField,
    NonFiniteError,
    coefficient_labels,
    coefficient_masks,
    dump_map,
    fill_from_function,
    load_field,
    load_map,
    dump_field,
    mask_axes,
    resample,
)


def poly_jet(coeffs: np.ndarray):
    """每軸次數 ≤ 3 的多項式（係數 c[i, j(, k)]）的精確節點 jet"""
    dims = coeffs.ndim
    evaluate = P.polyval2d if dims == 2 else P.polyval3d

    def jet(pts):
        cols = []
        for mask in coefficient_masks(dims):
            c = coeffs
            for a in mask_axes(mask):
                c = P.polyder(c, axis=a)
            cols.append(evaluate(*pts.T, c))
        return np.stack(cols, axis=-1)[:, None, :]

    def value(pts):
        return evaluate(*pts.T, coeffs)

    return jet, value


def x3y3_field(cells=16):
    c = np.zeros((4, 4))
    c[3, 3] = 1.0
    jet, value = poly_jet(c)
    return fill_from_function(GridGeometry(dims=2, cells=cells), value, jet=jet), value


def random_field(geometry, components=1, seed=0):
    rng = np.random.default_rng(seed)
    shape = geometry.node_shape + (components, 1 << geometry.dims)
    return HermiteField(geometry, rng.normal(size=shape))


# ============================================
# 係數排列與幾何
# ============================================

def test_coefficient_labels_order():
    assert coefficient_labels(2) == ["f", "f_x", "f_y", "f_xy"]
    assert coefficient_labels(3) == ["f", "f_x", "f_y", "f_z", "f_xy", "f_xz", "f_yz", "f_xyz"]


def test_geometry_node_counts():
    clamped = GridGeometry(dims=2, cells=8)
    periodic = GridGeometry(dims=3, cells=8, boundary=Boundary.PERIODIC)
    assert clamped.node_shape == (9, 9)
    assert periodic.node_shape == (8, 8, 8)
    assert clamped.dx == pytest.approx(1 / 8)


def test_geometry_rejects_unequal_sides():
    with pytest.raises(ValueError):
        GridGeometry(dims=2, cells=4, lo=(0.0, 0.0), hi=(1.0, 2.0))


# ============================================
# 求值
# ============================================

def test_linear_slice_reproduced():
    c = np.zeros((4, 4))
    c[1, 0] = 1.0
    jet, value = poly_jet(c)
    field = fill_from_function(GridGeometry(dims=2, cells=4), value, jet=jet)
    assert field.eval([0.5, 0.3]) == pytest.approx(0.5, abs=1e-15)


def test_x3y3_value_and_gradient():
    field, _ = x3y3_field()
    assert field.eval([0.3, 0.7]) == pytest.approx(0.009261, rel=1e-12)
    value, grad = field.eval_with_gradient([0.5, 0.5])
    assert value == pytest.approx(0.015625, rel=1e-12)
    np.testing.assert_allclose(grad, [0.09375, 0.09375], rtol=1e-12)


def test_constant_field_has_zero_gradient():
    geometry = GridGeometry(dims=2, cells=5)
    field = fill_from_function(geometry, lambda p: np.full(len(p), 3.5))
    _, grad = field.eval_with_gradient(np.random.default_rng(1).random((20, 2)))
    np.testing.assert_allclose(grad, 0.0, atol=1e-12)


def test_identity_map_eval_is_exact():
    chi = MapField.identity(GridGeometry(dims=2, cells=32))
    pts = np.random.default_rng(2).random((100, 2))
    np.testing.assert_array_equal(chi.eval(pts), pts)
    assert chi.is_identity()


@pytest.mark.parametrize("dims", [2, 3])
def test_polynomial_reproduction(dims):
    rng = np.random.default_rng(dims)
    coeffs = rng.normal(size=(4,) * dims)
    jet, value = poly_jet(coeffs)
    field = fill_from_function(GridGeometry(dims=dims, cells=6), value, jet=jet)
    pts = rng.random((1000, dims))
    exact = value(pts)
    scale = max(1.0, np.max(np.abs(exact)))
    assert np.max(np.abs(field.eval(pts) - exact)) < 1e-12 * scale


def test_node_values_interpolated_exactly():
    geometry = GridGeometry(dims=2, cells=16)
    field = random_field(geometry)
    np.testing.assert_allclose(
        field.eval(geometry.node_points()), field.node_block()[:, 0, 0], rtol=0, atol=1e-14
    )


def test_c1_across_cell_faces():
    geometry = GridGeometry(dims=2, cells=8)
    field = random_field(geometry, seed=3)
    ys = np.random.default_rng(4).random(50)
    face = 3 * geometry.dx
    gap = 1e-12
    left = np.stack([np.full_like(ys, face - gap), ys], axis=-1)
    right = np.stack([np.full_like(ys, face + gap), ys], axis=-1)
    v_left, g_left = field.eval_with_gradient(left)
    v_right, g_right = field.eval_with_gradient(right)
    np.testing.assert_allclose(v_left, v_right, atol=1e-9)
    np.testing.assert_allclose(g_left, g_right, atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 1023), st.integers(0, 1023))
def test_periodic_wrap(i, j):
    geometry = GridGeometry(dims=2, cells=16, boundary=Boundary.PERIODIC)
    field = random_field(geometry, seed=5)
    x = np.array([i / 1024, j / 1024])
    assert field.eval(x) == field.eval(x + 1.0)


def test_periodic_wrap_arbitrary_points():
    geometry = GridGeometry(dims=2, cells=16, boundary=Boundary.PERIODIC)
    field = random_field(geometry, seed=6)
    x = np.random.default_rng(7).random((200, 2))
    shifted = x + 1.0
    # 平移後的座標取模回區域內，兩者求值逐位元相同
    np.testing.assert_array_equal(field.eval(shifted), field.eval(np.mod(shifted, 1.0)))
    np.testing.assert_allclose(field.eval(shifted), field.eval(x), rtol=0, atol=1e-13)


def test_clamped_out_of_domain_query_is_clamped():
    field, _ = x3y3_field(8)
    assert field.eval([1.3, 0.5]) == pytest.approx(field.eval([1.0, 0.5]), rel=1e-14)


def test_nan_query_raises():
    field, _ = x3y3_field(4)
    with pytest.raises(NonFiniteError):
        field.eval([np.nan, 0.2])


# ============================================
# 重取樣與填入
# ============================================

def test_resample_identity_map_stays_identity():
    chi = MapField.identity(GridGeometry(dims=2, cells=32))
    fine = resample(chi.displacement, chi.geometry.with_cells(64))
    assert MapField(fine).is_identity()


def test_resample_reproduces_cubic():
    field, value = x3y3_field(16)
    target = field.geometry.with_cells(32)
    fine = resample(field, target)
    np.testing.assert_allclose(fine.node_block()[:, 0, 0], value(target.node_points()), atol=1e-14)


def test_resample_to_same_geometry_and_back():
    field, _ = x3y3_field(16)
    same = resample(field, field.geometry)
    np.testing.assert_allclose(same.data, field.data, atol=1e-13)
    round_trip = resample(resample(field, field.geometry.with_cells(64)), field.geometry)
    np.testing.assert_allclose(round_trip.data, field.data, atol=1e-10)


def test_resample_rejects_other_boundary():
    field, _ = x3y3_field(8)
    with pytest.raises(GridMismatchError):
        resample(field, GridGeometry(dims=2, cells=8, boundary=Boundary.PERIODIC))


def test_fill_identity_by_finite_differences():
    geometry = GridGeometry(dims=2, cells=7)
    field = fill_from_function(geometry, lambda p: p)
    block = field.node_block()
    np.testing.assert_allclose(block[:, :, 0], geometry.node_points(), atol=1e-15)
    np.testing.assert_allclose(block[:, 0, 1], 1.0, atol=1e-8)
    np.testing.assert_allclose(block[:, 1, 2], 1.0, atol=1e-8)
    np.testing.assert_allclose(block[:, 0, 2], 0.0, atol=1e-8)
    np.testing.assert_allclose(block[:, :, 3], 0.0, atol=1e-8)


def test_fill_circle_distance_at_center():
    geometry = GridGeometry(dims=2, cells=4)
    field = fill_from_function(geometry, lambda p: np.linalg.norm(p - 0.5, axis=1) - 0.15)
    assert field.eval([0.5, 0.5]) == pytest.approx(-0.15, abs=1e-15)


def test_fill_zero_function():
    field = fill_from_function(GridGeometry(dims=3, cells=3), lambda p: np.zeros(len(p)))
    assert not np.any(field.data)


# ============================================
# Dump 格式
# ============================================

def test_map_dump_round_trip(tmp_path):
    geometry = GridGeometry(dims=2, cells=6, boundary=Boundary.PERIODIC)
    chi = MapField(random_field(geometry, components=2, seed=7))
    path = dump_map(chi, tmp_path / "chi.dump")
    header = path.read_text(encoding="utf-8").splitlines()[:9]
    assert header[0] == "# hermite-field v1"
    assert "# boundary periodic" in header
    loaded = load_map(path)
    assert loaded.geometry == geometry
    np.testing.assert_array_equal(loaded.displacement.data, chi.displacement.data)


def test_load_map_rejects_plain_field(tmp_path):
    field, _ = x3y3_field(4)
    path = dump_field(field, tmp_path / "f.dump")
    _, representation = load_field(path)
    assert representation == "field"
    with pytest.raises(ValueError):
        load_map(path)
