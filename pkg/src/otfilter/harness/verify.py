"""Fast oracle and property checks behind ``otfilter verify``."""

import numpy as np

from .. import autodiff as ad
from ..autodiff import MapNet, PotentialNet, grad_u, laplacian_u
from ..cot import TrainConfig
from ..filters import FilterConfig, run_filter
from ..metrics import mmd, wasserstein_1d, wasserstein_exact
from ..oracle import (Density1D, caffarelli_check, cdf_map_1d, gaussian_brenier, hessian_recursion,
                      kalman_precision, posterior_squared_model, scalar_gaussian_bounds, stability_gap)
from ..ssm import lorenz63, simulate_truth


def _random_spd(rng, n):
    G = rng.standard_normal((n, n))
    return G @ G.T + 0.2 * np.eye(n)


def check_caffarelli(trials=50):
    rng = np.random.default_rng(7)
    fails = 0
    for _ in range(trials):
        n = int(rng.integers(1, 6))
        res = caffarelli_check(rng.standard_normal(n), _random_spd(rng, n), rng.standard_normal(n),
                               _random_spd(rng, n))
        fails += not res.passed
    return fails == 0, f"{fails} failures in {trials} instances"


def check_hessian(steps=50):
    a, q = 0.8, 0.5
    b = hessian_recursion(scalar_gaussian_bounds(a, q, 1.0), steps)
    err = np.max(np.abs(b.gamma - kalman_precision(a, q, 1.0, steps)))
    return err <= 1e-12, f"max deviation from the Kalman precision recursion {err:.2e}"


def check_cdf_map():
    prior = Density1D.gaussian()
    shifted = Density1D.gaussian(1.0, 1.0)
    u = np.linspace(-4, 4, 401)
    err = np.max(np.abs(cdf_map_1d(prior, shifted, u) - u - 1))
    t0 = cdf_map_1d(prior, posterior_squared_model(1.0, 0.1), 0.0)
    return err <= 1e-4 and abs(t0) <= 1e-12, f"shift error {err:.1e}, T(0) = {t0:.1e}"


def check_brenier():
    rng = np.random.default_rng(3)
    P0, P1 = _random_spd(rng, 3), _random_spd(rng, 3)
    m0, m1 = rng.standard_normal(3), rng.standard_normal(3)
    A, _ = gaussian_brenier(m0, P0, m1, P1)
    B, _ = gaussian_brenier(m1, P1, m0, P0)
    err = np.max(np.abs(A @ B - np.eye(3)))
    push = np.max(np.abs(A @ P0 @ A - P1))
    return err <= 1e-10 and push <= 1e-10, f"inverse error {err:.1e}, covariance error {push:.1e}"


def check_sandwich(trials=5):
    rng = np.random.default_rng(11)
    ok = 0
    for _ in range(trials):
        n = 2
        P0, P1 = _random_spd(rng, n), _random_spd(rng, n)
        A, c = gaussian_brenier(np.zeros(n), P0, np.zeros(n), P1)
        Q = A + 0.1 * _random_spd(rng, n)
        res = stability_gap((Q, c + 0.1), np.zeros(n), P0, np.zeros(n), P1, n_mc=20_000, rng=rng)
        ok += res.holds()
    return ok == trials, f"{ok}/{trials} sandwiches hold at 3 SE"


def check_metrics():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        a, b = rng.standard_normal(30), rng.standard_normal(30)
        worst = max(worst, abs(wasserstein_exact(a, b) - wasserstein_1d(a, b)))
    a = rng.standard_normal((20, 2))
    return worst <= 1e-10 and mmd(a, a) == 0.0, f"1-d agreement {worst:.1e}, MMD(a,a) = {mmd(a, a)}"


def check_gradients():
    rng = np.random.default_rng(2)
    net = PotentialNet(1, 2, hidden=(8, 8), zero_init_output=False, rng=rng)
    y, u = rng.standard_normal((3, 1)), rng.standard_normal((3, 2))
    g = grad_u(net, y, u)
    h = 1e-6
    fd = np.zeros_like(u)
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fd[:, k] = (ad.eval_potential(net, y, u + e) - ad.eval_potential(net, y, u - e)) / (2 * h)
    rel = np.max(np.abs(g - fd)) / max(np.max(np.abs(fd)), 1e-12)
    lap = laplacian_u(net, y, u)
    return rel <= 1e-5 and np.all(np.isfinite(lap)), f"input-gradient relative error {rel:.1e}"


def check_reduction():
    m = lorenz63()
    tr = simulate_truth(m, 5, 0)
    tc = TrainConfig(iterations=2, hidden=(8, 8))
    a = run_filter("enkf", m, tr.observations, FilterConfig(n_particles=50, train=tc), seed=1)
    b = run_filter("otf_enkf", m, tr.observations, FilterConfig(n_particles=50, train=tc, freeze_map=True), seed=1)
    same = all(np.array_equal(a.ensembles[t], b.ensembles[t]) for t in a.ensembles)
    return same, "frozen OTF-EnKF equals EnKF bitwise" if same else "ensembles differ"


CHECKS = {
    "caffarelli": check_caffarelli,
    "hessian_recursion": check_hessian,
    "cdf_map": check_cdf_map,
    "gaussian_brenier": check_brenier,
    "map_stability": check_sandwich,
    "metrics": check_metrics,
    "gradients": check_gradients,
    "enkf_reduction": check_reduction,
}


def run_checks(names=None):
    out = []
    for name, fn in CHECKS.items():
        if names is not None and name not in names:
            continue
        try:
            ok, detail = fn()
        except Exception as exc:  # reported as a failed check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
