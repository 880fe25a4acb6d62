import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chaoscal import dynamics as dyn


def l96_scalar_oracle(X, Y, F, h, c, b, K, J):
    """Term-by-term transcription with explicit modular indices."""
    dX = np.zeros(K)
    dY = np.zeros(K * J)
    for k in range(K):
        ybar = sum(Y[k * J + j] for j in range(J)) / J
        dX[k] = -X[(k - 1) % K] * (X[(k - 2) % K] - X[(k + 1) % K]) - X[k] + F - h * c * ybar
    n = K * J
    for i in range(n):
        k = i // J
        dY[i] = c * (-b * Y[(i + 1) % n] * (Y[(i + 2) % n] - Y[(i - 1) % n]) - Y[i] + (h / J) * X[k])
    return np.concatenate([dX, dY])


def test_l96_zero_state_gives_forcing():
    K, J = 5, 3
    out = dyn.l96_rhs(np.zeros(K * (J + 1)), [8.0, 1.0, 10.0, 10.0], K, J)
    assert np.all(out[:K] == 8.0)
    assert np.all(out[K:] == 0.0)


def test_l96_fixed_example_matches_oracle():
    K, J = 4, 2
    X = np.array([1.0, 2.0, 3.0, 4.0])
    Y = np.full(K * J, 0.1)
    got = dyn.l96_rhs(np.concatenate([X, Y]), dyn.L96Params(2.0, 1.0, 5.0, 1.0), K, J)
    want = l96_scalar_oracle(X, Y, 2.0, 1.0, 5.0, 1.0, K, J)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=0)
    # slow block by hand: -X[k-1](X[k-2] - X[k+1]) - X[k] + F - h*c*0.1
    np.testing.assert_allclose(got[:4], [-3.5, -1.5, 4.5, -5.5], rtol=1e-12)


def test_l96_random_state_matches_oracle():
    rng = np.random.default_rng(3)
    K, J = 4, 2
    for _ in range(20):
        z = rng.standard_normal(K * (J + 1)) * 5
        F, h, c, b = rng.uniform(-5, 20), rng.uniform(0, 5), rng.uniform(0.1, 25), rng.uniform(0, 25)
        got = dyn.l96_rhs(z, [F, h, c, b], K, J)
        want = l96_scalar_oracle(z[:K], z[K:], F, h, c, b, K, J)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12 * np.abs(want).max())


def test_l96_state_dimension():
    assert dyn.state_dim("l96", 36, 10) == 396
    assert dyn.state_dim("kse", d=256) == 256
    with pytest.raises(ValueError):
        dyn.l96_rhs(np.zeros(10), [1, 1, 1, 1], 4, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(3, 7), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_l96_shift_equivariance(K, J, seed):
    # rotating the ring by one slow index (and J fast indices) commutes with the rhs
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(K * (J + 1))
    p = rng.uniform(0.5, 10, 4)
    shift = lambda v: np.concatenate([np.roll(v[:K], 1), np.roll(v[K:], J)])
    np.testing.assert_allclose(dyn.l96_rhs(shift(z), p, K, J), shift(dyn.l96_rhs(z, p, K, J)), rtol=1e-12, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_l96_batch_equals_rows(B, seed):
    rng = np.random.default_rng(seed)
    K, J = 4, 3
    z = rng.standard_normal((B, K * (J + 1)))
    p = rng.uniform(0.5, 10, (B, 4))
    batched = dyn.l96_rhs(z, p, K, J)
    for i in range(B):
        np.testing.assert_array_equal(batched[i], dyn.l96_rhs(z[i], p[i], K, J))


def test_param_validation():
    with pytest.raises(ValueError):
        dyn.L96Params(1, 1, 0.0, 1)
    with pytest.raises(ValueError):
        dyn.L96Params(float("nan"), 1, 1, 1)
    with pytest.raises(ValueError):
        dyn.KseParams(1, 0.0, 1)


# --------------------------------------------------------------------------- KSE


def test_kse_constant_field_is_stationary():
    grid = dyn.KseGrid(256, 32.0)
    out = dyn.kse_rhs(np.full(256, 1.7), [1.0, 1.0, 1.0], grid)
    assert out.shape == (256,)
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


@pytest.mark.parametrize("m", [1, 3, 7])
def test_kse_linear_mode(m):
    grid = dyn.KseGrid(256, 32.0)
    q = math.pi * m / grid.L
    v = np.cos(q * grid.x)
    l2, l4 = 2.0, 1.5
    out = dyn.kse_rhs(v, [l2, l4, 0.0], grid)
    np.testing.assert_allclose(out, (l2 * q**2 - l4 * q**4) * v, atol=1e-10)


def test_kse_nonlinear_term_symbolic():
    # V = sin(qx): -l2 V_xx - l4 V_xxxx - lnl V V_x = (l2 q^2 - l4 q^4) sin - lnl q sin cos
    grid = dyn.KseGrid(64, 8.0)
    q = math.pi * 2 / grid.L
    x = grid.x
    l2, l4, lnl = 0.7, 0.3, 1.9
    out = dyn.kse_rhs(np.sin(q * x), [l2, l4, lnl], grid)
    want = (l2 * q**2 - l4 * q**4) * np.sin(q * x) - lnl * q * np.sin(q * x) * np.cos(q * x)
    np.testing.assert_allclose(out, want, atol=1e-10)


def test_kse_grid_validation_and_nan():
    with pytest.raises(ValueError):
        dyn.KseGrid(100, 32.0)
    grid = dyn.KseGrid(16, 2.0)
    with pytest.raises(dyn.IntegrationError):
        dyn.kse_rhs(np.full(16, np.nan), [1, 1, 1], grid)


@pytest.mark.parametrize("method", ["ifrk4", "rk4"])
def test_kse_single_mode_growth_rate(method):
    grid = dyn.KseGrid(64, 32.0)
    m = 5
    q = math.pi * m / grid.L
    l2, l4 = 1.0, 1.0
    rate = l2 * q**2 - l4 * q**4
    v0 = 0.01 * np.cos(q * grid.x)
    steps, dt = 10, 0.1
    states, valid, _ = dyn.simulate_kse([[l2, l4, 0.0]], grid, dt, steps, v0[None], method=method)
    assert valid[0]
    amp = states[0] @ np.cos(q * grid.x) / (grid.d / 2)
    measured = np.log(amp[-1] / amp[0]) / (steps * dt)
    assert abs(measured - rate) <= 0.01 * abs(rate)


def _smooth_field(grid):
    q = math.pi / grid.L
    return (np.cos(q * grid.x) + 0.5 * np.sin(2 * q * grid.x))[None]


def test_kse_ifrk4_agrees_with_rk4():
    grid = dyn.KseGrid(64, 8.0)
    v0 = _smooth_field(grid)
    p = [[1.0, 1.0, 1.0]]
    a, va, _ = dyn.simulate_kse(p, grid, 0.05, 20, v0, method="ifrk4", substeps=40)
    b, vb, _ = dyn.simulate_kse(p, grid, 0.05, 20, v0, method="rk4")
    assert va[0] and vb[0]
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_kse_ifrk4_fourth_order():
    grid = dyn.KseGrid(64, 8.0)
    v0 = _smooth_field(grid)
    p = [[1.0, 1.0, 1.0]]
    ref = dyn.simulate_kse(p, grid, 0.05, 20, v0, method="rk4")[0]
    errs = [np.abs(dyn.simulate_kse(p, grid, 0.05, 20, v0, substeps=s)[0] - ref).max() for s in (5, 10)]
    assert 10 <= errs[0] / errs[1] <= 20


def test_kse_stable_substeps_bound():
    grid = dyn.KseGrid(256, 32.0)
    s = dyn.kse_stable_substeps([1.0, 1.0, 1.0], grid, 0.5)
    rate = grid.q_max**4 - grid.q_max**2
    assert 0.5 / s * rate <= 2.78 * 0.8 + 1e-9


# --------------------------------------------------------------------------- RK4


def test_rk4_constant_dynamics():
    v = np.array([1.0, -2.0, 3.0])
    out, valid = dyn.integrate_rk4(lambda z: np.zeros_like(z), v, 0.1, 7)
    assert valid.shape == () and bool(valid)
    assert np.all(out == v)


def test_rk4_exponential_decay():
    out, _ = dyn.integrate_rk4(lambda z: -z, np.array([1.0]), 0.1, 10)
    assert abs(out[-1, 0] - math.exp(-1)) < 1e-6


def test_rk4_fourth_order_convergence():
    def err(dt):
        out, _ = dyn.integrate_rk4(lambda z: -z, np.array([1.0]), dt, round(1 / dt))
        return abs(out[-1, 0] - math.exp(-1))

    ratio = err(0.1) / err(0.05)
    assert 12 <= ratio <= 20


def test_rk4_substeps_equal_smaller_dt():
    a, _ = dyn.integrate_rk4(lambda z: -z * z, np.array([0.5]), 0.2, 5, substeps=4)
    b, _ = dyn.integrate_rk4(lambda z: -z * z, np.array([0.5]), 0.05, 20)
    np.testing.assert_allclose(a[-1], b[-1], rtol=1e-14)


def test_rk4_flags_divergence():
    z0 = np.array([[1.0], [0.01]])
    out, valid = dyn.integrate_rk4(lambda z: z**3, z0, 0.5, 10)
    assert valid.tolist() == [False, True]
    assert np.isnan(out[-1, 0]).all()
    assert np.isfinite(out[:, 1]).all()


def test_rk4_rejects_bad_arguments():
    with pytest.raises(ValueError):
        dyn.integrate_rk4(lambda z: z, np.array([1.0]), 0.0, 1)
    with pytest.raises(ValueError):
        dyn.integrate_rk4(lambda z: z, np.array([1.0]), 0.1, 1, substeps=0)
    with pytest.raises(ValueError):
        dyn.integrate_rk4(lambda z: z, 1.0, 0.1, 1)


def test_l96_retry_rescues_stiff_member():
    K, J = 8, 4
    rng = np.random.default_rng(0)
    z0 = np.stack([rng.standard_normal(K * (J + 1)) for _ in range(2)])
    p = np.array([[10.0, 1.0, 10.0, 10.0], [10.0, 1.0, 10.0, 25.0]])
    states, valid, used = dyn.simulate_l96(p, K, J, 0.1, 50, z0, substeps=2, max_substeps=320)
    assert valid.all()
    assert used[1] > 2
    assert states.shape == (2, 51, K * (J + 1))


def test_simulate_l96_burn_in_drops_rows():
    K, J = 4, 2
    z0 = np.random.default_rng(1).standard_normal((1, K * (J + 1)))
    full, _, _ = dyn.simulate_l96([[8, 1, 10, 10]], K, J, 0.1, 30, z0)
    cut, _, _ = dyn.simulate_l96([[8, 1, 10, 10]], K, J, 0.1, 20, z0, burn_in=10)
    np.testing.assert_allclose(cut[0], full[0, 10:], rtol=1e-12)


# --------------------------------------------------------------------------- data helpers


def test_initial_conditions():
    a = dyn.sample_initial_condition("l96", np.random.default_rng(5))
    b = dyn.sample_initial_condition("l96", np.random.default_rng(5))
    assert a.shape == (396,)
    np.testing.assert_array_equal(a, b)
    v = dyn.sample_initial_condition("kse", np.random.default_rng(5), d=256)
    assert v.shape == (256,) and np.all(np.abs(v) <= np.pi)


def test_ic_from_observation():
    Z = np.arange(3000.0).reshape(1000, 3)
    i = np.random.default_rng(9).integers(1000)
    row = dyn.ic_from_observation(Z, np.random.default_rng(9))
    np.testing.assert_array_equal(row, Z[i])
    np.testing.assert_array_equal(dyn.ic_from_observation(Z[:1], np.random.default_rng(0)), Z[0])
    with pytest.raises(ValueError):
        dyn.ic_from_observation(np.zeros((0, 3)), np.random.default_rng(0))


def test_validate_trajectory():
    assert dyn.validate_trajectory(np.ones((10, 3))) == dyn.Validation(False, "degenerate")
    Z = np.random.default_rng(0).standard_normal((10, 3))
    Z[4, 1] = np.nan
    assert dyn.validate_trajectory(Z).reason == "nan"
    assert dyn.validate_trajectory(np.zeros((0, 3))).reason == "empty"
    K, J = 8, 4
    z0 = np.random.default_rng(2).standard_normal((1, K * (J + 1)))
    states, valid, _ = dyn.simulate_l96([[10, 1, 10, 10]], K, J, 0.1, 200, z0)
    v = dyn.validate_trajectory(states[0])
    assert valid[0] and v.accepted and states[0].std() > 1e3 * dyn.DEGENERATE_STD


def test_observation_noise():
    rng = np.random.default_rng(0)
    Z = dyn.Trajectory(rng.standard_normal((10000, 4)) * [1, 2, 3, 4], 0.1)
    same = dyn.add_observation_noise(Z, 0.0, rng)
    np.testing.assert_array_equal(same.states, Z.states)
    for r in (0.1, 0.2):
        noisy = dyn.add_observation_noise(Z, r, np.random.default_rng(1))
        ratio = (noisy.states - Z.states).var(axis=0) / (r * Z.states.var(axis=0))
        assert np.all(np.abs(ratio - 1) < 0.1)
    with pytest.raises(ValueError):
        dyn.add_observation_noise(Z, -0.1, rng)
