import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dynsr.exceptions import CFLError, ConfigurationError, InstabilityError, ShapeError
from dynsr.galewsky import GalewskyParams, init_state
from dynsr.grid import build_grid
from dynsr.solver import (PhysicalConstants, ShallowWaterModel, SweState, bernoulli,
                          relative_vorticity, rest_state, tendencies, total_mass)


def _random_state(grid, seed, amp=5.0):
    r = np.random.default_rng(seed)
    h = 10000.0 + 50.0 * r.normal(size=grid.shape)
    u = amp * r.normal(size=grid.shape)
    v = amp * r.normal(size=grid.shape)
    v[-1] = 0.0
    return SweState(h, u, v, 0.0)


def _solid_body(grid, u0=20.0):
    u = np.repeat(u0 * np.cos(grid.lat_centers)[:, None], grid.nlon, axis=1)
    return SweState(np.full(grid.shape, 10000.0), u, np.zeros(grid.shape))


def _williamson2(grid, consts, u0=2 * np.pi * 6.371e6 / (12 * 86400)):
    # steady zonal geostrophic flow
    phi = grid.lat_centers[:, None] * np.ones(grid.shape)
    h = 2.94e4 / consts.g - (grid.radius * consts.Omega * u0 + 0.5 * u0**2) * np.sin(phi) ** 2 / consts.g
    return SweState(h, u0 * np.cos(phi), np.zeros(grid.shape))


# -- state and constants --------------------------------------------------------
def test_state_shape_mismatch():
    with pytest.raises(ShapeError):
        SweState(np.zeros((4, 8)), np.zeros((4, 8)), np.zeros((4, 9)))


@pytest.mark.parametrize("kw", [{"g": 0.0}, {"Omega": -1.0}, {"b": np.array([np.nan])}])
def test_constants_validated(kw):
    with pytest.raises(ConfigurationError):
        PhysicalConstants(**kw)


def test_unknown_backend(small_grid):
    with pytest.raises(ConfigurationError):
        ShallowWaterModel(small_grid, backend="fortran")


# -- vorticity and Bernoulli ------------------------------------------------------
def test_vorticity_of_rest_is_zero(small_grid):
    assert np.all(relative_vorticity(rest_state(small_grid), small_grid) == 0.0)


def test_solid_body_vorticity_converges():
    errs = []
    for nlat in (16, 32, 64):
        g = build_grid(nlat, 2 * nlat)
        zeta = relative_vorticity(_solid_body(g), g)
        exact = 2 * 20.0 / g.radius * np.sin(g.lat_edges)
        errs.append(np.max(np.abs(zeta - exact[:, None])) / np.max(np.abs(exact)))
    assert errs[0] / errs[1] >= 1.8 and errs[1] / errs[2] >= 1.8
    assert errs[-1] < 1e-2


def test_vorticity_global_integral_zero(small_grid):
    s = _random_state(small_grid, 3)
    zeta = relative_vorticity(s, small_grid)
    scale = np.sum(small_grid.corner_area * np.abs(zeta))
    assert abs(np.sum(small_grid.corner_area * zeta)) <= 1e-12 * scale


def test_bernoulli_rest(small_grid, consts):
    b = bernoulli(rest_state(small_grid, 1234.0), consts, small_grid)
    assert np.allclose(b, consts.g * 1234.0, rtol=1e-15)


def test_bernoulli_uniform_zonal_flow(small_grid, consts):
    s = SweState(np.zeros(small_grid.shape), np.full(small_grid.shape, 2.0), np.zeros(small_grid.shape))
    assert np.allclose(bernoulli(s, consts, small_grid), 2.0, rtol=1e-14)


def test_bernoulli_toy_field_direct_evaluation():
    consts = PhysicalConstants(g=10.0)
    r = np.random.default_rng(5)
    h, u, v = r.normal(size=(3, 8)), r.normal(size=(3, 8)), r.normal(size=(3, 8))
    v[-1] = 0.0
    got = bernoulli(SweState(h, u, v), consts)
    expect = np.empty((3, 8))
    for j in range(3):
        for i in range(8):
            vs = v[j - 1, i] if j > 0 else 0.0
            vn = v[j, i] if j < 2 else 0.0
            k = 0.25 * (u[j, i] ** 2 + u[j, i - 1] ** 2 + vs**2 + vn**2)
            expect[j, i] = 10.0 * h[j, i] + k
    assert np.allclose(got, expect, rtol=1e-14, atol=0)


# -- tendencies ------------------------------------------------------------------
@pytest.mark.parametrize("backend", ["numba", "numpy"])
def test_rest_state_tendencies_exactly_zero(small_grid, consts, backend):
    m = ShallowWaterModel(small_grid, consts, backend=backend)
    for t in m.tendencies(rest_state(small_grid)):
        assert np.all(t == 0.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_flux_divergence_sums_to_zero(seed):
    g = build_grid(12, 24)
    dh, _, _ = tendencies(_random_state(g, seed), g, PhysicalConstants(), filter_lat=60.0)
    scale = np.sum(g.cell_area * np.abs(dh))
    assert abs(np.sum(g.cell_area * dh)) <= 1e-13 * scale


def test_backends_agree(small_grid, consts):
    s = _random_state(small_grid, 11)
    a = ShallowWaterModel(small_grid, consts, backend="numba").tendencies(s)
    b = ShallowWaterModel(small_grid, consts, backend="numpy").tendencies(s)
    for x, y in zip(a, b):
        assert np.allclose(x, y, rtol=1e-11, atol=1e-12 * np.max(np.abs(y)))


def test_north_pole_v_tendency_zero(small_grid, consts):
    _, _, dv = ShallowWaterModel(small_grid, consts).tendencies(_random_state(small_grid, 2))
    assert np.all(dv[-1] == 0.0)


def test_balance_residual_decreases_under_refinement(consts):
    res = []
    for nlat in (32, 64, 128):
        g = build_grid(nlat, 2 * nlat)
        _, du, dv = ShallowWaterModel(g, consts).tendencies(init_state(g, GalewskyParams(perturbed=False)))
        res.append(max(np.abs(du).max(), np.abs(dv).max()))
    assert res[0] / res[1] >= 1.8 and res[1] / res[2] >= 1.8


# -- stepping ----------------------------------------------------------------------
def test_rest_state_fixed_point(small_grid, consts):
    s0 = rest_state(small_grid)
    s = ShallowWaterModel(small_grid, consts).integrate(s0, 900.0, 1000 * 900.0)
    assert np.max(np.abs(s.h - s0.h)) <= 1e-13 * 10000.0
    assert np.all(s.u == 0.0) and np.all(s.v == 0.0)


def test_mass_conserved_over_1000_steps(consts):
    g = build_grid(32, 64)
    s0 = init_state(g, GalewskyParams(n_phi=1, n_lambda=3))
    s = ShallowWaterModel(g, consts).integrate(s0, 360.0, 1000 * 360.0)
    m0, m1 = total_mass(s0, g), total_mass(s, g)
    assert abs(m1 - m0) / m0 <= 1e-11


def test_williamson2_steady_state(consts):
    g = build_grid(32, 64)
    s0 = _williamson2(g, consts)
    s = ShallowWaterModel(g, consts).integrate(s0, 360.0, 86400.0)
    rel = np.sqrt(np.sum(g.cell_area * (s.h - s0.h) ** 2) / np.sum(g.cell_area * s0.h**2))
    assert rel < 1e-3


def test_rk4_fourth_order_in_time():
    g = build_grid(16, 32)
    c = PhysicalConstants(Omega=0.0)
    lat, lon = g.points()
    s = SweState(10000.0 + np.exp(-(lat**2 + lon**2) / 0.3), np.zeros(g.shape), np.zeros(g.shape))
    m = ShallowWaterModel(g, c)
    h = [m.integrate(s, dt, 21600.0).h for dt in (900.0, 450.0, 225.0)]
    ratio = np.abs(h[0] - h[1]).max() / np.abs(h[1] - h[2]).max()
    assert 13.0 < ratio < 19.0


def test_cfl_violation_reports_row(small_grid, consts):
    m = ShallowWaterModel(small_grid, consts)
    s = rest_state(small_grid)
    with pytest.raises(CFLError) as info:
        m.step(s, 10 * m.max_stable_dt(s))
    assert info.value.exit_code == 3
    assert info.value.row == 0 or info.value.row == small_grid.nlat - 1


def test_non_finite_input_raises(small_grid, consts):
    s = rest_state(small_grid)
    s.u[3, 4] = np.nan
    with pytest.raises(InstabilityError):
        ShallowWaterModel(small_grid, consts).tendencies(s)


def test_blow_up_raises_instability(small_grid, consts):
    s = rest_state(small_grid)
    s.h[5, 5] = np.inf
    m = ShallowWaterModel(small_grid, consts, check_cfl=False)
    with pytest.raises(InstabilityError):
        m.step(s, 10.0)


def test_nonpositive_dt(small_grid, consts):
    with pytest.raises(ConfigurationError):
        ShallowWaterModel(small_grid, consts).step(rest_state(small_grid), 0.0)


# -- integrate ------------------------------------------------------------------
def test_integrate_zero_span_returns_input(small_grid, consts):
    s = _random_state(small_grid, 0, amp=1.0)
    out = ShallowWaterModel(small_grid, consts).integrate(s, 600.0, s.t)
    assert out.bitwise_equal(s)


def test_hook_count_half_day_over_two_days(consts):
    g = build_grid(8, 16)
    calls = []
    ShallowWaterModel(g, consts).integrate(rest_state(g), 1800.0, 2 * 86400.0,
                                           hook=lambda st: calls.append(st.t), hook_interval=43200.0)
    assert calls == [43200.0, 86400.0, 129600.0, 172800.0]


def test_integrate_composes_bitwise(consts):
    g = build_grid(16, 32)
    s0 = init_state(g, GalewskyParams())
    m = ShallowWaterModel(g, consts)
    whole = m.integrate(s0, 600.0, 12 * 3600.0)
    half = m.integrate(m.integrate(s0, 600.0, 6 * 3600.0), 600.0, 12 * 3600.0)
    assert whole.bitwise_equal(half)


def test_span_not_multiple_of_dt(small_grid, consts):
    with pytest.raises(ConfigurationError):
        ShallowWaterModel(small_grid, consts).integrate(rest_state(small_grid), 600.0, 1000.0)
