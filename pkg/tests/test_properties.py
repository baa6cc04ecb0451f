import numpy as np
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from otfilter.autodiff import MapNet, PotentialNet, QuadraticPotential, eval_map, grad_u, laplacian_u
from otfilter.autodiff import eval_potential
from otfilter.cot import TrainingBatch, objective_J, penalty_monotone
from otfilter.metrics import mmd, wasserstein_1d, wasserstein_exact
from otfilter.oracle import Density1D, caffarelli_check, cdf_map_1d, gaussian_brenier
from otfilter.ssm import Ensemble, forecast, lorenz63, lorenz96, drift_eval

seeds = st.integers(0, 2**32 - 1)
finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def spd(rng, n):
    G = rng.standard_normal((n, n))
    return G @ G.T + 0.1 * np.eye(n)


@given(seeds, st.integers(2, 64), st.integers(1, 3))
def test_w2_symmetry_and_identity(seed, N, d):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((N, d)), r.standard_normal((N, d)) * 2
    assert wasserstein_exact(a, a) == 0.0
    assert abs(wasserstein_exact(a, b) - wasserstein_exact(b, a)) <= 1e-12


@given(seeds, st.integers(2, 64), st.integers(1, 3))
def test_w2_triangle_inequality(seed, N, d):
    r = np.random.default_rng(seed)
    a, b, c = (r.standard_normal((N, d)) * s + s for s in (1.0, 0.5, 2.0))
    assert wasserstein_exact(a, c) <= wasserstein_exact(a, b) + wasserstein_exact(b, c) + 1e-9


@given(arrays(np.float64, st.integers(1, 40), elements=finite), seeds)
def test_exact_matches_sorted_coupling(a, seed):
    b = np.random.default_rng(seed).standard_normal(a.size) * 3
    for p in (1, 2):
        assert abs(wasserstein_exact(a[:, None], b[:, None], p) - wasserstein_1d(a, b, p)) <= 1e-10


@given(seeds, st.integers(1, 30), st.integers(1, 30), st.floats(0.05, 10))
def test_mmd_nonnegative(seed, n, m, bw):
    r = np.random.default_rng(seed)
    a, b = r.standard_normal((n, 2)), r.standard_normal((m, 2))
    assert mmd(a, b, bw) >= 0
    assert mmd(a, a, bw) == 0.0
    assert abs(mmd(a, b, bw) - mmd(b, a, bw)) <= 1e-12


@given(seeds, st.integers(1, 20))
def test_objective_identity_zero(seed, N):
    r = np.random.default_rng(seed)
    b = TrainingBatch(r.standard_normal((N, 2)), r.standard_normal((N, 3)), r.standard_normal((N, 3)))
    assert objective_J(lambda y, u: np.zeros(len(u)), lambda y, v: v, b) == 0.0


@given(seeds, st.integers(2, 20))
def test_objective_permutation_invariance(seed, N):
    r = np.random.default_rng(seed)
    b = TrainingBatch(r.standard_normal((N, 1)), r.standard_normal((N, 2)), r.standard_normal((N, 2)))
    psi = lambda y, u: np.tanh(u).sum(axis=1) * (1 + y[:, 0] ** 2)
    T = lambda y, v: v * 1.5 - y
    p = r.permutation(N)
    a = objective_J(psi, T, b)
    c = objective_J(psi, T, TrainingBatch(b.y[p], b.u[p], b.v[p]))
    assert abs(a - c) <= 1e-12 * max(1.0, abs(a))


@given(seeds, st.integers(2, 15), st.floats(0.01, 5.0))
def test_monotone_penalty_sign(seed, N, c):
    r = np.random.default_rng(seed)
    v = r.standard_normal((N, 2))
    b = TrainingBatch(np.zeros((N, 1)), v, v)
    assert penalty_monotone(lambda y, w: c * w, b) <= 0
    assert penalty_monotone(lambda y, w: -c * w, b) > 0


@given(seeds, st.integers(1, 4))
def test_laplacian_of_quadratic_is_trace(seed, n):
    r = np.random.default_rng(seed)
    G = r.standard_normal((n, n))
    Q = G + G.T
    q = QuadraticPotential(1, n, Q0=Q, b0=r.standard_normal(n))
    assert abs(laplacian_u(q, r.standard_normal(1), r.standard_normal(n) * 3) - np.trace(Q)) <= 1e-8


@given(seeds)
def test_zero_init_map(seed):
    r = np.random.default_rng(seed)
    net = MapNet(2, 2, hidden=(5, 5), zero_init_output=True, rng=r)
    assert np.all(eval_map(net, r.standard_normal((10, 2)) * 5, r.standard_normal((10, 2)) * 5) == 0.0)


@given(seeds)
def test_input_gradient_exactness(seed):
    r = np.random.default_rng(seed)
    net = PotentialNet(1, 2, hidden=(6, 6), zero_init_output=False, rng=r)
    y, u = r.standard_normal((1, 1)), r.standard_normal((1, 2))
    g = grad_u(net, y, u)
    h = 1e-5
    fd = np.array([(eval_potential(net, y, u + h * e) - eval_potential(net, y, u - h * e)) / (2 * h)
                   for e in np.eye(2)])
    fd = fd.ravel()
    assert np.max(np.abs(g[0] - fd)) <= 1e-5 * max(np.max(np.abs(fd)), 1e-3)


@given(seeds, st.integers(1, 5))
def test_brenier_inverse(seed, n):
    r = np.random.default_rng(seed)
    P0, P1 = spd(r, n), spd(r, n)
    A, _ = gaussian_brenier(np.zeros(n), P0, np.zeros(n), P1)
    B, _ = gaussian_brenier(np.zeros(n), P1, np.zeros(n), P0)
    assert np.max(np.abs(A @ B - np.eye(n))) <= 1e-8 * np.linalg.cond(P0) * np.linalg.cond(P1)
    assert np.all(np.linalg.eigvalsh(A) > 0)


@given(seeds, st.integers(1, 6))
def test_caffarelli_always_holds(seed, n):
    r = np.random.default_rng(seed)
    assert caffarelli_check(r.standard_normal(n), spd(r, n), r.standard_normal(n), spd(r, n)).passed


@given(st.floats(-2, 2), st.floats(0.2, 3.0))
def test_cdf_map_monotone(mean, var):
    post = Density1D.gaussian(mean, var)
    prior = Density1D.gaussian()
    x = np.linspace(-5, 5, 1000)
    T = cdf_map_1d(prior, post, x)
    assert np.all(np.diff(T) >= 0)
    assert np.max(np.abs(T - (mean + np.sqrt(var) * x))) <= 1e-3


@given(seeds, st.integers(2, 50))
def test_forecast_preserves_cardinality(seed, N):
    r = np.random.default_rng(seed)
    out = forecast(lorenz63(), Ensemble(r.standard_normal((N, 3))), r)
    assert len(out) == N


@given(arrays(np.float64, 9, elements=finite), st.integers(0, 8))
def test_lorenz96_equivariance(u, k):
    m = lorenz96()
    lhs = np.roll(drift_eval(m, u), k)
    rhs = drift_eval(m, np.roll(u, k))
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * max(1.0, np.max(np.abs(lhs)))
