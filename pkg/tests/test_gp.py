import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from opflow.errors import RejectionLimitError
from opflow.gp import (GaussianMomentPair, GaussianProcessSpec, Observations, TruncationBounds,
                       covariance_matrix, fit_empirical_gaussian, gp_log_density, gp_sample, gpr_posterior,
                       grid_moments, marginal, matern_kernel, tgp_posterior_rejection, tgp_sample, w2_approx,
                       w2_squared_gaussian)
from opflow.grid import IndexSet, make_regular_grid


def test_matern_closed_forms():
    assert matern_kernel(0.0, GaussianProcessSpec(0.3, 2.5)) == pytest.approx(1.0)
    assert matern_kernel(0.5, GaussianProcessSpec(0.5, 0.5)) == pytest.approx(math.exp(-1), abs=1e-12)
    expected = (1 + math.sqrt(3)) * math.exp(-math.sqrt(3))
    assert matern_kernel(0.5, GaussianProcessSpec(0.5, 1.5)) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.48336, abs=1e-5)


def test_spec_validation():
    with pytest.raises(ValueError):
        GaussianProcessSpec(-1.0)
    with pytest.raises(ValueError):
        GaussianProcessSpec(0.5, roughness=1.0)


def test_covariance_matrix_examples():
    spec = GaussianProcessSpec(0.5, 0.5, variance=2.0)
    K = covariance_matrix(np.array([[0.3]]), spec)
    assert K.shape == (1, 1) and K[0, 0] == pytest.approx(2.0 + spec.default_jitter)
    K = covariance_matrix(np.array([[0.2], [0.2]]), GaussianProcessSpec(0.5, 0.5), jitter=0.0)
    np.testing.assert_allclose(K, [[1, 1], [1, 1]])
    K = covariance_matrix(np.array([[0.0], [0.5]]), GaussianProcessSpec(0.5, 0.5), jitter=0.0)
    np.testing.assert_allclose(K, [[1, math.exp(-1)], [math.exp(-1), 1]], atol=1e-12)


def test_gp_sample_degenerate_and_moments():
    g = make_regular_grid(1, 16)
    s = gp_sample(GaussianProcessSpec(0.5, 1.5, variance=1e-12), g, 10, seed=0)
    assert np.abs(s).max() < 1e-5
    s = gp_sample(GaussianProcessSpec(0.5, 1.5), make_regular_grid(1, 33), 10_000, seed=1)
    assert abs(s[:, 0, 16].var() - 1.0) < 0.05
    # covariance at lag 0.5 (node 0 vs node 16 on a 33-node grid)
    prod = s[:, 0, 0] * s[:, 0, 16]
    se = prod.std(ddof=1) / math.sqrt(len(prod))
    assert abs(prod.mean() - matern_kernel(0.5, GaussianProcessSpec(0.5, 1.5))) < 3 * se


def test_gp_sample_reproducible():
    g = make_regular_grid(2, [6, 6])
    spec = GaussianProcessSpec(0.5, 1.5)
    assert np.array_equal(gp_sample(spec, g, 5, seed=3), gp_sample(spec, g, 5, seed=3))


def test_log_density_examples():
    spec = GaussianProcessSpec(1.0, 0.5)
    assert gp_log_density([0.0], [[0.3]], spec, jitter=0.0) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-12)
    # exp(-d/l) = 0.5 gives the [[1, .5], [.5, 1]] covariance
    pts = np.array([[0.0], [math.log(2.0)]])
    val = gp_log_density([0.0, 0.0], pts, spec, jitter=0.0)
    assert val == pytest.approx(-math.log(2 * math.pi) - 0.5 * math.log(0.75), abs=1e-12)
    assert val == pytest.approx(-1.694036, abs=1e-6)


def test_gpr_examples():
    g = make_regular_grid(1, 8)
    spec = GaussianProcessSpec(0.5, 1.5)
    empty = Observations(IndexSet(g, ()), np.zeros((1, 0)))
    post = gpr_posterior(spec, empty)
    np.testing.assert_allclose(post.cov, covariance_matrix(g.coordinates(), spec), atol=1e-14)
    np.testing.assert_allclose(post.mean, 0)
    exact = Observations(IndexSet(g, (3,)), np.array([[0.7]]), noise_variance=0.0)
    post = gpr_posterior(spec, exact, jitter=0.0)
    assert post.mean[3] == pytest.approx(0.7, abs=1e-12)
    assert post.cov[3, 3] == pytest.approx(0.0, abs=1e-12)


def test_gpr_two_point():
    # nodes 0 and 1 on a unit-step grid with Matern-1/2, l = 1/ln 2 -> correlation 0.5
    g = make_regular_grid(1, 2)
    spec = GaussianProcessSpec(1 / math.log(2), 0.5)
    obs = Observations(IndexSet(g, (0,)), np.array([[1.0]]), 0.01)
    post = gpr_posterior(spec, obs, jitter=0.0)
    assert abs(post.mean[1] - 0.5 / 1.01) < 1e-12
    assert abs(post.cov[1, 1] - (1 - 0.25 / 1.01)) < 1e-12


def test_truncated_samples_in_bounds():
    g = make_regular_grid(1, 32)
    b = TruncationBounds(-1.2, 1.2)
    s = tgp_sample(GaussianProcessSpec(0.5, 1.5), b, g, 5000, seed=0)
    assert s.shape == (5000, 1, 32)
    assert np.all(np.abs(s) <= 1.2)


def test_truncated_vacuous_matches_gp():
    g = make_regular_grid(1, 16)
    spec = GaussianProcessSpec(0.5, 1.5)
    a = tgp_sample(spec, TruncationBounds(-1e9, 1e9), g, 50, seed=4, chunk=50)
    b = gp_sample(spec, g, 50, seed=4)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_truncated_posterior_windows():
    g = make_regular_grid(1, 32)
    spec = GaussianProcessSpec(0.5, 1.5)
    obs = Observations(IndexSet(g, (3, 20)), np.array([[0.4, -0.3]]))
    s = tgp_posterior_rejection(spec, TruncationBounds(-1.2, 1.2), obs, 0.1, 200, seed=0)
    assert np.all(np.abs(s[:, 0, [3, 20]] - [0.4, -0.3]) <= 0.1)
    assert np.all(np.abs(s) <= 1.2)
    vac = tgp_posterior_rejection(spec, TruncationBounds(-1e9, 1e9), obs, 1e9, 5, seed=1, chunk=5)
    np.testing.assert_allclose(vac, tgp_sample(spec, TruncationBounds(-1e9, 1e9), g, 5, seed=1, chunk=5))


def test_rejection_cap():
    g = make_regular_grid(1, 32)
    with pytest.raises(RejectionLimitError):
        tgp_sample(GaussianProcessSpec(0.5, 1.5), TruncationBounds(-0.01, 0.01), g, 10, seed=0,
                   max_draws=1000, chunk=500)


def test_w2_examples():
    p = GaussianMomentPair(np.zeros(1), np.eye(1))
    q = GaussianMomentPair(np.ones(1), 4 * np.eye(1))
    assert w2_squared_gaussian(p, q) == pytest.approx(2.0, abs=1e-12)
    assert w2_approx(p, q) == pytest.approx(10.0, abs=1e-12)
    assert w2_squared_gaussian(p, p) == 0 and w2_approx(p, p) == 0
    p2 = GaussianMomentPair(np.zeros(2), np.eye(2))
    q2 = GaussianMomentPair(np.zeros(2), np.diag([4.0, 9.0]))
    assert w2_squared_gaussian(p2, q2) == pytest.approx(2.5, abs=1e-12)
    q3 = GaussianMomentPair(np.array([1.0, 0.0]), np.eye(2))
    assert w2_approx(p2, q3) == pytest.approx(0.5)


def _random_pair(rng, n):
    A = rng.standard_normal((n, n))
    return GaussianMomentPair(rng.standard_normal(n), A @ A.T + 0.1 * np.eye(n))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_w2_symmetric_and_nonnegative(n, seed):
    rng = np.random.default_rng(seed)
    p, q = _random_pair(rng, n), _random_pair(rng, n)
    a, b = w2_squared_gaussian(p, q), w2_squared_gaussian(q, p)
    assert a >= 0
    assert a == pytest.approx(b, rel=1e-6, abs=1e-8)
    assert w2_squared_gaussian(p, p) == pytest.approx(0, abs=1e-8)


def test_w2_matches_approx_when_covariances_equal():
    rng = np.random.default_rng(0)
    p = _random_pair(rng, 4)
    q = GaussianMomentPair(p.mean + 1.0, p.cov)
    assert w2_squared_gaussian(p, q) == pytest.approx(w2_approx(p, q), abs=1e-9)


def test_w2_dimension_mismatch():
    with pytest.raises(ValueError):
        w2_approx(GaussianMomentPair(np.zeros(1), np.eye(1)), GaussianMomentPair(np.zeros(2), np.eye(2)))


def test_fit_empirical_gaussian():
    fit = fit_empirical_gaussian(np.array([[0.0], [2.0]]))
    np.testing.assert_array_equal(fit.mean, [1.0])
    np.testing.assert_allclose(fit.cov, [[2.0]])
    same = fit_empirical_gaussian(np.ones((5, 3)))
    np.testing.assert_array_equal(same.cov, 0)
    x = np.random.default_rng(0).standard_normal((7, 3))
    assert np.array_equal(fit_empirical_gaussian(x).mean, x.mean(axis=0))
    with pytest.raises(ValueError):
        fit_empirical_gaussian(np.zeros((1, 3)))


def test_moment_pair_rejects_asymmetric():
    with pytest.raises(ValueError):
        GaussianMomentPair(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]]))


def test_grid_moments_block_diagonal():
    g = make_regular_grid(1, 4)
    m = grid_moments(GaussianProcessSpec(0.5, 1.5), g, channels=2)
    assert m.dim == 8
    np.testing.assert_array_equal(m.cov[:4, 4:], 0)
    np.testing.assert_array_equal(marginal(m, range(4)).cov, m.cov[:4, :4])
