"""
GALS 平流測試
"""

import math

import numpy as np
import pytest

from flow import constant_field, custom_field, rigid_rotation, swirl_2d, trace_backward_rk3
from gals import GalsConfig, advect_map, gals_advect_scalar_run, gals_step, time_steps
from hermite import Boundary, GridGeometry, HermiteField, MapField, NonFiniteError, fill_from_function
from timing import PhaseTimer

TWO_PI = 2 * math.pi


def sine_field(cells: int, boundary=Boundary.PERIODIC) -> HermiteField:
    """f(x, y) = sin(2πx) 的精確節點資料"""
    geometry = GridGeometry(dims=2, cells=cells, boundary=boundary)

    def jet(pts):
        x = pts[:, 0]
        zero = np.zeros_like(x)
        return np.stack([np.sin(TWO_PI * x), TWO_PI * np.cos(TWO_PI * x), zero, zero], axis=-1)[:, None, :]

    return fill_from_function(geometry, None, jet=jet)


def smooth_field(cells: int = 16) -> HermiteField:
    geometry = GridGeometry(dims=2, cells=cells)
    return fill_from_function(geometry, lambda p: np.sin(3 * p[:, 0]) * np.cos(2 * p[:, 1]) + p[:, 0] ** 2)


def test_time_steps_truncate_last_step():
    steps = list(time_steps(0.0, 1.0, 0.3))
    assert len(steps) == 4
    assert steps[-1][0] == pytest.approx(0.9)
    assert steps[-1][1] == pytest.approx(0.1)
    assert list(time_steps(2.0, 2.0, 0.1)) == []


def test_zero_velocity_fixpoint():
    field = smooth_field()
    out = gals_step(field, constant_field([0.0, 0.0]), 0.0, 0.05, GalsConfig())
    np.testing.assert_allclose(out.data, field.data, rtol=0, atol=1e-10)


def test_zero_velocity_run_accumulates_no_drift():
    field = smooth_field(8)
    out = gals_advect_scalar_run(field, constant_field([0.0, 0.0]), 0.0, 1.0, GalsConfig(dt=0.05))
    np.testing.assert_allclose(out.data, field.data, rtol=0, atol=1e-8)


def test_empty_interval_returns_input():
    field = smooth_field(8)
    out = gals_advect_scalar_run(field, swirl_2d(), 1.0, 1.0, GalsConfig())
    np.testing.assert_array_equal(out.data, field.data)


def test_linearity():
    geometry = GridGeometry(dims=2, cells=8)
    rng = np.random.default_rng(0)
    shape = geometry.node_shape + (1, 4)
    f = HermiteField(geometry, rng.normal(size=shape))
    g = HermiteField(geometry, rng.normal(size=shape))
    combo = HermiteField(geometry, 2.0 * f.data - 0.5 * g.data)
    v, cfg = swirl_2d(16.0), GalsConfig()
    lhs = gals_step(combo, v, 0.3, 0.05, cfg).data
    rhs = 2.0 * gals_step(f, v, 0.3, 0.05, cfg).data - 0.5 * gals_step(g, v, 0.3, 0.05, cfg).data
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)


def test_identity_map_one_step_matches_traced_footpoints():
    geometry = GridGeometry(dims=2, cells=32)
    cfg = GalsConfig()
    chi = advect_map(MapField.identity(geometry), swirl_2d(16.0), 0.5, geometry.dx, cfg)
    nodes = geometry.node_points()
    foot = trace_backward_rk3(swirl_2d(16.0), nodes, 0.5, geometry.dx)
    eps = cfg.epsilon_rel * geometry.dx
    assert np.max(np.abs(chi.node_values() - foot)) < eps * 1e-3


def test_rigid_rotation_single_step_map():
    geometry = GridGeometry(dims=2, cells=64)
    dt = geometry.dx
    chi = advect_map(MapField.identity(geometry), rigid_rotation(), 0.0, dt, GalsConfig())
    nodes = geometry.node_points()
    c = np.array([0.5, 0.5])
    rot = np.array([[math.cos(-dt), -math.sin(-dt)], [math.sin(-dt), math.cos(-dt)]])
    exact = (nodes - c) @ rot.T + c
    assert np.max(np.abs(chi.node_values() - exact)) < 1e-6


def test_rigid_rotation_map_recovers_node_forward():
    """映射在節點的值沿精確流正向走 dt 回到節點"""
    geometry = GridGeometry(dims=2, cells=32)
    dt = geometry.dx
    chi = advect_map(MapField.identity(geometry), rigid_rotation(), 0.0, dt, GalsConfig())
    c = np.array([0.5, 0.5])
    rot = np.array([[math.cos(dt), -math.sin(dt)], [math.sin(dt), math.cos(dt)]])
    forward = (chi.node_values() - c) @ rot.T + c
    assert np.max(np.abs(forward - geometry.node_points())) < 1e-7


def test_translating_sine_convergence():
    speed, final_time = 1.0, 0.25
    errors, sizes = [], [32, 64, 128]
    samples = np.random.default_rng(1).random((500, 2))
    exact = np.sin(TWO_PI * (samples[:, 0] - speed * final_time))
    for n in sizes:
        cfg = GalsConfig(cfl_default=0.7)
        out = gals_advect_scalar_run(sine_field(n), constant_field([speed, 0.0]), 0.0, final_time, cfg)
        errors.append(np.max(np.abs(out.eval(samples) - exact)))
    slope = np.polyfit(np.log(sizes), np.log(errors), 1)[0]
    assert -slope >= 2.5


def test_clamped_footpoints_are_counted():
    geometry = GridGeometry(dims=2, cells=8)
    field = HermiteField.zeros(geometry)
    timer = PhaseTimer()
    gals_step(field, constant_field([1.0, 0.0]), 0.0, 0.1, GalsConfig(), timer)
    # x < 0.1 的節點追回區域外
    assert timer.counters["clamped_footpoints"] == 9


def test_tangential_boundary_flow_is_not_clamped(caplog):
    # swirl 在區域邊界上速度為零，邊界節點的 footpoint 只差 O(ε²)
    chi = MapField.identity(GridGeometry(dims=2, cells=16))
    timer = PhaseTimer()
    with caplog.at_level("WARNING", logger="gals"):
        for k in range(4):
            chi = advect_map(chi, swirl_2d(16.0), k / 16, 1 / 16, GalsConfig(), timer)
    assert timer.counters["clamped_footpoints"] == 0
    assert not [r for r in caplog.records if r.name == "gals"]


def test_nan_velocity_aborts_with_step():
    bad = custom_field(lambda x, t: np.full(x.shape, np.nan))
    with pytest.raises(NonFiniteError) as info:
        gals_advect_scalar_run(smooth_field(4), bad, 0.0, 1.0, GalsConfig(dt=0.5))
    assert info.value.step == 1


def test_invalid_config():
    with pytest.raises(ValueError):
        GalsConfig(epsilon_rel=0.6)
    with pytest.raises(ValueError):
        GalsConfig(dt=0.0)
