import numpy as np
import pytest

from otfilter.exceptions import ContractViolation
from otfilter.filters import FilterConfig, run_filter
from otfilter.metrics import (DivergenceSpec, mean_filtering_error, mmd, mse, wasserstein, wasserstein_1d,
                              wasserstein_exact)
from otfilter.ssm import linear_gaussian, simulate_truth

from kalman import kalman_means


def test_wasserstein_1d_examples(rng):
    a = rng.standard_normal(10)
    assert wasserstein_1d(a, a) == 0.0
    assert wasserstein_1d([0.0], [2.0], 2) == pytest.approx(2.0)
    assert wasserstein_1d([0.0, 1.0], [1.0, 2.0], 1) == pytest.approx(1.0)


def test_wasserstein_1d_unequal_counts(rng):
    a, b = rng.standard_normal(4), rng.standard_normal(6)
    # replicating atoms does not change an empirical measure
    expected = wasserstein_1d(np.repeat(a, 3), np.repeat(b, 2))
    assert wasserstein_1d(a, b) == pytest.approx(expected, rel=1e-12)
    assert wasserstein_1d([0.0, 1.0], [0.0, 0.5, 1.0]) == pytest.approx(np.sqrt(1 / 12))


def test_wasserstein_1d_rejects_empty():
    with pytest.raises(ContractViolation):
        wasserstein_1d([], [1.0])


def test_wasserstein_exact_examples(rng):
    assert wasserstein_exact([[0.0, 0.0]], [[3.0, 4.0]]) == pytest.approx(5.0)
    a = rng.standard_normal((20, 3))
    assert wasserstein_exact(a, a[rng.permutation(20)]) == 0.0
    x, y = rng.standard_normal(50), rng.standard_normal(50) + 0.3
    for p in (1, 2):
        assert abs(wasserstein_exact(x[:, None], y[:, None], p) - wasserstein_1d(x, y, p)) <= 1e-10


def test_wasserstein_exact_cap(rng):
    a = rng.standard_normal((20, 2))
    with pytest.raises(ContractViolation, match="subsample"):
        wasserstein_exact(a, a, cap=10)


def test_sinkhorn_close_to_exact(rng):
    a, b = rng.standard_normal((200, 2)), rng.standard_normal((200, 2)) + 1
    exact = wasserstein_exact(a, b)
    approx = wasserstein(a, b, cap=100, sinkhorn=True)
    assert approx == pytest.approx(exact, rel=0.05)


def test_mmd_examples(rng):
    a = rng.standard_normal((15, 2))
    assert mmd(a, a) == 0.0
    assert mmd([0.0], [0.0], 1.0) == 0.0
    assert mmd([0.0], [1.0], 1.0) == pytest.approx(np.sqrt(2 - 2 * np.exp(-0.5)))


def test_mmd_bandwidth_validation():
    with pytest.raises(ContractViolation):
        mmd([0.0], [1.0], -1.0)
    with pytest.raises(ContractViolation):
        DivergenceSpec("MMD", bandwidth=0.0)
    with pytest.raises(ContractViolation):
        DivergenceSpec("KL")


def test_mse_examples(rng):
    x = rng.standard_normal((6, 3))
    series, avg = mse(x, x)
    assert np.all(series == 0) and avg == 0
    series, _ = mse(x + 0.5, x)
    np.testing.assert_allclose(series, 0.25)
    series, avg = mse([[1.0], [3.0]], [[0.0], [0.0]])
    np.testing.assert_array_equal(series, [1.0, 9.0])
    assert avg == 5.0
    with pytest.raises(ContractViolation):
        mse(x, x[:4])


def linear_setup():
    A, H, Q, R = (np.array([[0.8]]), np.array([[1.0]]), np.array([[0.5]]), np.array([[1.0]]))
    return (A, H, Q, R), linear_gaussian(A, H, Q, R, np.zeros(1), np.eye(1))


def test_mean_filtering_error_trivial_cases():
    _, m = linear_setup()
    tr = simulate_truth(m, 5, 0)
    run = run_filter("enkf", m, tr.observations, FilterConfig(n_particles=64), 0)
    steps, mean, se = mean_filtering_error([run], run.ensembles)
    np.testing.assert_array_equal(mean, 0.0)
    other = run_filter("sir", m, tr.observations, FilterConfig(n_particles=64), 1)
    steps, mean, se = mean_filtering_error([run], other.ensembles)
    expected = [wasserstein_exact(run.ensembles[t], other.ensembles[t]) for t in steps]
    np.testing.assert_allclose(mean, expected)
    assert np.all(se == 0)


def test_mean_filtering_error_against_recomputation():
    mats, m = linear_setup()
    tr = simulate_truth(m, 10, 0)
    km, kp = kalman_means(*mats, np.zeros(1), np.eye(1), tr.observations)
    r = np.random.default_rng(3)
    N = 200
    reference = {t: km[t - 1] + np.sqrt(kp[t - 1, 0, 0]) * r.standard_normal((N, 1)) for t in range(1, 11)}
    runs = [run_filter("enkf", m, tr.observations, FilterConfig(n_particles=N), s) for s in range(5)]
    steps, mean, se = mean_filtering_error(runs, reference)
    direct = np.array([[np.sqrt(np.mean((np.sort(run.ensembles[t][:, 0]) - np.sort(reference[t][:, 0])) ** 2))
                        for t in steps] for run in runs])
    assert np.all(np.abs(mean - direct.mean(axis=0)) <= 3 * se + 1e-12)


def test_mean_filtering_error_step_mismatch():
    _, m = linear_setup()
    tr = simulate_truth(m, 4, 0)
    a = run_filter("enkf", m, tr.observations, FilterConfig(n_particles=8), 0)
    b = run_filter("enkf", m, tr.observations, FilterConfig(n_particles=8, snapshot_stride=2), 0)
    with pytest.raises(ContractViolation):
        mean_filtering_error([a, b], a.ensembles)
