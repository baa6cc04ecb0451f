import numpy as np
import pytest
from scipy.stats import kstest

from otfilter.exceptions import ContractViolation, ExtrapolationError, InvalidRegimeError
from otfilter.oracle import (Density1D, HessianBounds, SquaredModelOracle, caffarelli_check, cdf_map_1d,
                             gaussian_brenier, hessian_recursion, kalman_precision, posterior_squared_model,
                             potential_1d, rescaled_fixed_points, scalar_gaussian_bounds, stability_gap)

STD = Density1D.gaussian()
GRID = np.linspace(-4, 4, 401)


def test_cdf_map_identity_and_shift():
    assert np.max(np.abs(cdf_map_1d(STD, STD, GRID) - GRID)) <= 1e-4
    shifted = Density1D.gaussian(1.0, 1.0)
    assert np.max(np.abs(cdf_map_1d(STD, shifted, GRID) - GRID - 1)) <= 1e-4


def test_cdf_map_bimodal_center():
    assert cdf_map_1d(STD, posterior_squared_model(1.0, 0.1), 0.0) == pytest.approx(0.0, abs=1e-12)


def test_cdf_map_monotone():
    post = posterior_squared_model(1.0, 0.1)
    x = np.linspace(-7.9, 7.9, 1000)
    assert np.all(np.diff(cdf_map_1d(STD, post, x)) >= 0)


def test_extrapolation_error():
    with pytest.raises(ExtrapolationError):
        cdf_map_1d(STD, STD, 9.0)


def test_potential_examples():
    u = np.linspace(-3, 3, 61)
    h = 1e-3
    same = (potential_1d(STD, STD, u + h) - potential_1d(STD, STD, u - h)) / (2 * h)
    assert np.max(np.abs(same)) <= 1e-4
    shifted = Density1D.gaussian(1.0, 1.0)
    psi = potential_1d(STD, shifted, u)
    assert np.max(np.abs(psi - u - (psi[30] - u[30]))) <= 1e-3
    post = posterior_squared_model(1.0, 0.1)
    v = np.linspace(0, 2.5, 26)
    assert np.max(np.abs(potential_1d(STD, post, v) - potential_1d(STD, post, -v))) <= 1e-3


def test_potential_gradient_recovers_inverse_map():
    shifted = Density1D.gaussian(0.5, 2.0)
    u = np.linspace(-2, 3, 11)
    h = 1e-3
    dpsi = (potential_1d(STD, shifted, u + h) - potential_1d(STD, shifted, u - h)) / (2 * h)
    # d/du (u^2/2 - psi) = T^{-1}(u) = (u - 0.5) / sqrt(2)
    np.testing.assert_allclose(u - dpsi, (u - 0.5) / np.sqrt(2), atol=1e-3)


def test_squared_posterior_shape():
    post = posterior_squared_model(1.0, 0.1)
    mode = np.sqrt(2 * (1 - 0.01))
    assert mode == pytest.approx(1.40712, abs=1e-5)
    peak = post.x[np.argmax(post.pdf)]
    assert abs(abs(peak) - mode) <= post.x[1] - post.x[0]
    assert np.max(np.abs(post.pdf - post.pdf[::-1])) <= 1e-12
    flat = posterior_squared_model(0.0, 0.1)
    i = np.argmin(np.abs(flat.x))
    assert np.argmax(flat.pdf) in (i - 1, i, i + 1)
    assert flat.pdf[i + 1] - 2 * flat.pdf[i] + flat.pdf[i - 1] < 0


def test_density_tables():
    post = posterior_squared_model(1.0, 0.1)
    assert np.all(np.diff(STD.cdf_table) >= 0)
    assert STD.cdf_table[-1] == pytest.approx(1.0, abs=1e-8)
    x = np.linspace(-3, 3, 101)
    np.testing.assert_allclose(STD.quantile(STD.cdf(x)), x, atol=1e-6)
    inner = np.linspace(1.0, 1.8, 41)
    np.testing.assert_allclose(post.quantile(post.cdf(inner)), inner, atol=1e-6)
    with pytest.raises(ContractViolation):
        STD.quantile(1.5)


def test_squared_oracle_map_pushes_prior_to_posterior():
    orc = SquaredModelOracle([1.0], 0.1)
    r = np.random.default_rng(0)
    post = orc.posteriors[0]
    # two-sample W2 between bimodal clouds is dominated by the sign split, so compare CDFs
    for x in (orc.map(r.standard_normal((4000, 1)))[:, 0], orc.sample(4000, r)[:, 0]):
        assert kstest(x, post.cdf).pvalue > 1e-3
    u = np.linspace(-3, 3, 201)
    np.testing.assert_allclose(post.cdf(orc.map(u[:, None])[:, 0]), orc.prior.cdf(u), atol=1e-6)


def test_gaussian_brenier_examples():
    A, c = gaussian_brenier(np.zeros(2), np.eye(2), np.zeros(2), np.eye(2))
    np.testing.assert_allclose(A, np.eye(2))
    np.testing.assert_allclose(c, 0)
    A, c = gaussian_brenier([0.0], [[1.0]], [1.0], [[0.25]])
    assert A[0, 0] == pytest.approx(0.5) and c[0] == pytest.approx(1.0)


def test_gaussian_brenier_pushforward(rng):
    P0 = np.array([[2.0, 0.5], [0.5, 1.0]])
    P1 = np.array([[0.7, -0.2], [-0.2, 1.5]])
    m0, m1 = np.array([1.0, -1.0]), np.array([0.5, 2.0])
    A, c = gaussian_brenier(m0, P0, m1, P1)
    x = m0 + rng.standard_normal((100_000, 2)) @ np.linalg.cholesky(P0).T
    z = x @ A.T + c
    np.testing.assert_allclose(z.mean(axis=0), m1, rtol=0.02, atol=0.02)
    np.testing.assert_allclose(np.cov(z.T), P1, rtol=0.02, atol=0.02)
    B, _ = gaussian_brenier(m1, P1, m0, P0)
    assert np.max(np.abs(A @ B - np.eye(2))) <= 1e-10


def test_gaussian_brenier_rejects_non_spd():
    with pytest.raises(ContractViolation):
        gaussian_brenier([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]], [0.0, 0.0], np.eye(2))


def test_hessian_first_step():
    b = hessian_recursion(scalar_gaussian_bounds(1.0, 1.0, 1.0), 1)
    assert b.gamma[1] == pytest.approx(0.5)


def test_hessian_independent_dynamics():
    b = HessianBounds((2.0, 3.0), (1.0, 1.0), (0.0, 0.0), (1.0, 1.0), (1.0, 1.0), 0.7, 5.0)
    out = hessian_recursion(b, 10)
    np.testing.assert_array_equal(out.gamma[1:], 2.0)
    np.testing.assert_array_equal(out.Gamma[1:], 3.0)


def test_hessian_matches_kalman():
    for a, q in ((0.8, 0.5), (1.3, 2.0)):
        b = hessian_recursion(scalar_gaussian_bounds(a, q, 1.0), 50)
        assert np.max(np.abs(b.gamma - kalman_precision(a, q, 1.0, 50))) <= 1e-12


def test_hessian_fixed_point_convergence():
    b = HessianBounds((2, 3), (1, 1.5), (0.5, 0.8), (1, 1), (0.9, 1.1), 1.0, 2.0)
    assert all(b.conditions())
    out = hessian_recursion(b, 20)
    for seq, star in ((out.gamma, out.gamma_star), (out.Gamma, out.Gamma_star)):
        dist = np.abs(seq - star)
        steps = np.diff(dist)
        assert np.all(steps[dist[:-1] > 1e-12] < 0)
        assert np.all(steps <= 1e-15)
    assert out.gamma_star <= out.Gamma_star
    x, X = rescaled_fixed_points(b)
    assert x == pytest.approx(out.gamma_star / 1.1**2)
    assert np.all(out.gamma <= out.Gamma)


def test_hessian_invalid_regime():
    b = HessianBounds((0.1, 0.1), (1.0, 1.0), (2.0, 2.0), (1.0, 1.0), (1.0, 1.0), 1.0, 1.0)
    with pytest.raises(InvalidRegimeError):
        hessian_recursion(b, 3)
    with pytest.raises(ContractViolation):
        HessianBounds((0.0, 1.0), (1, 1), (0, 0), (1, 1), (1, 1), 1.0, 1.0)


def test_stability_at_optimum(rng):
    P0, P1 = np.eye(2), np.diag([0.5, 2.0])
    A, c = gaussian_brenier(np.zeros(2), P0, np.ones(2), P1)
    res = stability_gap((A, c), np.zeros(2), P0, np.ones(2), P1, n_mc=20_000, rng=rng)
    assert abs(res.gap) <= 3 * res.gap_se + 1e-12
    assert res.lower == pytest.approx(0.0, abs=1e-20) and res.upper == pytest.approx(0.0, abs=1e-20)


def test_stability_squared_potential(rng):
    res = stability_gap(([[2.0]], [0.0]), [0.0], [[1.0]], [0.0], [[1.0]], n_mc=100_000, rng=rng)
    assert res.exact_gap == pytest.approx(0.25)
    assert res.exact_norm == pytest.approx(1.0)
    assert res.alpha == res.beta == 2.0
    assert res.holds()


def test_stability_random_perturbations(rng):
    for _ in range(20):
        G = rng.standard_normal((2, 2))
        P0, P1 = G @ G.T + 0.5 * np.eye(2), np.diag(rng.uniform(0.5, 2.0, 2))
        A, c = gaussian_brenier(np.zeros(2), P0, np.zeros(2), P1)
        E = rng.standard_normal((2, 2)) * 1e-3
        res = stability_gap((A + E @ E.T, c + 1e-3), np.zeros(2), P0, np.zeros(2), P1, n_mc=20_000, rng=rng)
        assert res.holds()
        assert res.exact_norm / (2 * res.beta) <= res.exact_gap + 1e-15
        assert res.exact_gap <= res.exact_norm / (2 * res.alpha) + 1e-15


def test_caffarelli_examples(rng):
    iso = caffarelli_check(np.zeros(3), np.eye(3), np.zeros(3), 4 * np.eye(3))
    assert iso.passed
    np.testing.assert_allclose(iso.eigenvalues, 2.0)
    assert iso.lower == pytest.approx(2.0) and iso.upper == pytest.approx(2.0)
    same = caffarelli_check(np.zeros(2), np.eye(2), np.zeros(2), np.eye(2))
    assert same.passed and np.allclose(same.eigenvalues, 1.0)
    for _ in range(50):
        n = int(rng.integers(1, 5))
        G, H = rng.standard_normal((n, n)), rng.standard_normal((n, n))
        assert caffarelli_check(np.zeros(n), G @ G.T + 0.1 * np.eye(n), np.ones(n), H @ H.T + 0.1 * np.eye(n)).passed
