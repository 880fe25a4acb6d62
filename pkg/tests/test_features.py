import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from chaoscal import dynamics as dyn
from chaoscal import features as ft


def l96_moments_loop(Z, K, J):
    T = Z.shape[0]
    out = np.zeros(5 * K)
    for k in range(K):
        sx = sy = sxx = sxy = syy = 0.0
        for t in range(T):
            x = Z[t, k]
            y = sum(Z[t, K + k * J + j] for j in range(J)) / J
            sx += x
            sy += y
            sxx += x * x
            sxy += x * y
            syy += y * y
        for blk, val in enumerate((sx, sy, sxx, sxy, syy)):
            out[blk * K + k] = val / T
    return out


def test_l96_moments_constant():
    K, J = 3, 2
    Z = np.concatenate([np.full((7, K), 2.0), np.full((7, K * J), -3.0)], axis=1)
    np.testing.assert_allclose(ft.l96_moments(Z, K, J), np.repeat([2.0, -3.0, 4.0, -6.0, 9.0], K))


def test_l96_moments_match_loop():
    K, J = 4, 3
    Z = np.random.default_rng(0).standard_normal((10, K * (J + 1)))
    np.testing.assert_allclose(ft.l96_moments(Z, K, J), l96_moments_loop(Z, K, J), rtol=1e-12)
    assert ft.l96_moments(np.zeros((2, 396)), 36, 10).shape == (180,)


def test_l96_moments_batched():
    K, J = 2, 2
    Z = np.random.default_rng(1).standard_normal((3, 5, K * (J + 1)))
    batched = ft.l96_moments(Z, K, J)
    for i in range(3):
        np.testing.assert_allclose(batched[i], ft.l96_moments(Z[i], K, J))
    with pytest.raises(ValueError):
        ft.l96_moments(np.zeros((5, 7)), K, J)


def test_kse_moments():
    np.testing.assert_allclose(ft.kse_moments(np.full((4, 256), 1.5)), np.full(256, 1.5))
    u, w = np.arange(5.0), np.arange(5.0) ** 2
    np.testing.assert_allclose(ft.kse_moments(np.stack([u, w])), (u + w) / 2)


def test_block_moment_variance():
    u, w = np.array([1.0, 4.0]), np.array([3.0, 0.0])
    m = (u + w) / 2
    np.testing.assert_allclose(ft.block_moment_variance([u, w]), ((u - m) ** 2 + (w - m) ** 2) / 2)
    rows = lambda n: np.ones((n, 3))
    with pytest.raises(ValueError, match="rejected"):
        ft.moment_variance(rows, lambda z: z.mean(0), 5, 4)


def test_moment_variance_zero_for_constant_blocks():
    ramp = lambda n: np.tile(np.linspace(0, 1, 5), (n // 5, 1)).reshape(n, 1) * np.ones((1, 2))
    # each block is the same ramp, so every block moment is identical
    np.testing.assert_allclose(ft.moment_variance(ramp, lambda z: z.mean(0), 5, 4), 0.0, atol=1e-15)


def test_moment_variance_positive_on_chaotic_run():
    K, J = 8, 4
    z0 = np.random.default_rng(0).standard_normal((1, K * (J + 1)))

    def simulate(n):
        return dyn.simulate_l96([[10, 1, 10, 10]], K, J, 0.1, n - 1, z0)[0][0]

    var = ft.moment_variance(simulate, lambda z: ft.l96_moments(z, K, J), 50, 20)
    assert var.shape == (40,) and np.all(var > 0)


def test_crop():
    rng = np.random.default_rng(0)
    Z = np.random.default_rng(1).standard_normal((1000, 6))
    np.testing.assert_array_equal(ft.crop(Z, 1000, rng), Z)
    for _ in range(50):
        c = ft.crop(dyn.Trajectory(Z, 0.1), 250, rng)
        s = c.meta["crop_start"]
        assert c.states.shape == (250, 6) and 0 <= s <= 750
        np.testing.assert_array_equal(c.states, Z[s : s + 250])
    with pytest.raises(ValueError):
        ft.crop(Z, 1001, rng)


def test_ape_example():
    a, b = [1.0, 1.0], [2.0, 1.0]
    assert ft.ape(a, b, eps=0) == 1.0
    assert ft.ape(b, a, eps=0) == 0.5
    assert ft.delta(a, b, eps=0) == 0.75
    assert ft.delta(a, a) == 0.0
    with pytest.raises(ValueError):
        ft.ape([1.0], [1.0, 2.0])


vec = arrays(np.float64, 4, elements=st.floats(-50, 50, allow_nan=False))


@settings(max_examples=100, deadline=None)
@given(vec, vec)
def test_delta_symmetric_and_nonnegative(a, b):
    assert ft.delta(a, b) == ft.delta(b, a)
    assert ft.delta(a, b) >= 0


def test_delta_matrix_matches_pairwise():
    P = np.random.default_rng(2).uniform(-5, 20, (12, 4))
    D = ft.delta_matrix(P)
    for i in range(12):
        for j in range(12):
            assert abs(D[i, j] - ft.delta(P[i], P[j])) <= 1e-12 * max(1.0, D[i, j])


def test_nearest_neighbors_ties_and_duplicates():
    P = np.array([[1.0, 1.0], [2.0, 2.0], [1.0, 1.0], [5.0, 5.0]])
    idx, dist = ft.nearest_neighbors(P)
    assert idx[0] == 2 and dist[0] == 0.0
    assert idx[2] == 0
    # equidistant candidates: the lowest index wins
    idx, _ = ft.nearest_neighbors(np.array([[1.0], [1.0], [1.0]]))
    assert idx.tolist() == [1, 0, 0]


def test_threshold_and_rule_defaults():
    assert ft.PositivePairRule.threshold_for(500) == 0.45
    assert ft.PositivePairRule.threshold_for(1000) == 0.4
    assert ft.PositivePairRule.threshold_for(4000) == 0.4
    r = ft.PositivePairRule()
    assert (r.perturb_std, r.perturb_prob) == (0.04, 0.5)
    with pytest.raises(ValueError):
        ft.PositivePairRule(threshold=0)


def test_select_positive_neighbor_and_fallback():
    rng = np.random.default_rng(0)
    P = np.array([[10.0, 1.0], [10.5, 1.0], [100.0, 50.0]])
    Z = np.random.default_rng(1).standard_normal((3, 40, 2))
    rule = ft.PositivePairRule(threshold=0.4, crop_len=10)
    pair = ft.select_positive(0, P, Z, rule, rng)
    assert pair.source == "neighbor" and pair.index == 1 and pair.crop.shape == (10, 2)
    np.testing.assert_array_equal(pair.params, P[1])
    sources, perturbed = set(), 0
    for _ in range(200):
        pair = ft.select_positive(2, P, Z, rule, rng)
        sources.add(pair.source)
        assert pair.index == 2 and pair.crop.shape == (10, 2)
        perturbed += not np.array_equal(pair.params, P[2])
    assert sources == {"augment"}
    assert 60 < perturbed < 140


def test_select_positive_zero_perturbation_is_identity():
    P = np.array([[1.0, 2.0], [50.0, 70.0]])
    Z = np.zeros((2, 20, 1))
    rule = ft.PositivePairRule(threshold=0.1, perturb_prob=1.0, perturb_std=0.0, crop_len=5)
    pair = ft.select_positive(0, P, Z, rule, np.random.default_rng(0))
    np.testing.assert_array_equal(pair.params, P[0])


def test_select_positive_precomputed_neighbors_agree():
    P = np.random.default_rng(4).uniform(1, 10, (20, 4))
    Z = np.random.default_rng(5).standard_normal((20, 30, 3))
    rule = ft.PositivePairRule(threshold=0.45, crop_len=8)
    nb = ft.nearest_neighbors(P)
    for i in range(20):
        a = ft.select_positive(i, P, Z, rule, np.random.default_rng(i))
        b = ft.select_positive(i, P, Z, rule, np.random.default_rng(i), nb)
        assert a.index == b.index and a.source == b.source
        np.testing.assert_array_equal(a.crop, b.crop)
