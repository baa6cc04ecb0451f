import numpy as np
import pytest

from otfilter.exceptions import ContractViolation, NumericalOverflowError
from otfilter.ssm import (Ensemble, StateSpaceModel, drift_eval, forecast, linear_gaussian, lorenz63,
                          lorenz96, observe, simulate_truth, squared_model, step_dynamics)


def identity_model(n=2, sigma_proc=0.0):
    return StateSpaceModel("linear", n, n, sigma_proc=sigma_proc, obs_kind="select",
                           obs_index=tuple(range(1, n + 1)), init_mean=1.5, init_cov=1e-30)


def test_lorenz63_drift():
    m = lorenz63()
    np.testing.assert_allclose(drift_eval(m, [1.0, 1.0, 1.0]), [0.0, 26.0, -5.0 / 3.0])
    np.testing.assert_array_equal(drift_eval(m, np.zeros(3)), np.zeros(3))


def test_lorenz96_drift_at_zero():
    np.testing.assert_array_equal(drift_eval(lorenz96(), np.zeros(9)), np.full(9, 8.0))


def test_lorenz96_shift_equivariance(rng):
    m = lorenz96()
    u = rng.standard_normal(9) * 3
    np.testing.assert_allclose(np.roll(drift_eval(m, u), 1), drift_eval(m, np.roll(u, 1)), atol=1e-12)


def test_drift_dimension_mismatch():
    with pytest.raises(ContractViolation):
        drift_eval(lorenz63(), np.zeros(4))


def test_euler_step_by_hand():
    m = lorenz63(sigma_proc=0.0)
    out = step_dynamics(m, np.ones(3), np.zeros(3))
    np.testing.assert_allclose(out, [1.0, 1.26, 1.0 - 0.05 / 3.0], atol=1e-14)


def test_identity_step_without_noise():
    u = np.array([0.3, -2.0])
    np.testing.assert_array_equal(step_dynamics(identity_model(), u, np.zeros(2)), u)


def test_linear_gaussian_step():
    m = linear_gaussian(0.5, 1.0, 1.0, 1.0, 0.0, 1.0)
    assert step_dynamics(m, np.array([2.0]), np.array([1.0]))[0] == pytest.approx(2.0)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_overflow_reports_step():
    m = linear_gaussian(1e300, 1.0, 1.0, 1.0, 0.0, 1.0)
    with pytest.raises(NumericalOverflowError) as info:
        step_dynamics(m, np.array([1e300]), np.zeros(1), step=7)
    assert info.value.step == 7


def test_observe_examples(rng):
    assert observe(squared_model(1, 0.1), np.array([2.0]), np.zeros(1))[0] == 2.0
    assert observe(lorenz63(), np.array([1.0, 2.0, 3.0]), np.zeros(1))[0] == 3.0
    m = lorenz96()
    reps = 20_000
    u = np.tile(np.arange(1.0, 10.0), (reps, 1))
    y = observe(m, u, rng.standard_normal((reps, 3)))
    tol = 3 * np.sqrt(0.1) / np.sqrt(reps)
    np.testing.assert_allclose(y.mean(axis=0), [1.0, 4.0, 7.0], atol=tol)


def test_selector_out_of_range():
    with pytest.raises(ContractViolation):
        lorenz63(obs_index=(4,))


def test_simulate_truth_single_step():
    tr = simulate_truth(identity_model(), 1, 0)
    np.testing.assert_array_equal(tr.states[0], tr.initial)


def test_simulate_truth_deterministic():
    a = simulate_truth(lorenz63(), 50, 3)
    b = simulate_truth(lorenz63(), 50, 3)
    assert a.states.tobytes() == b.states.tobytes()
    assert a.observations.tobytes() == b.observations.tobytes()


def test_lorenz63_truth_bounded():
    tr = simulate_truth(lorenz63(), 500, 0)
    assert np.all(np.isfinite(tr.states))
    assert np.max(np.abs(tr.states)) < 100


def test_forecast_preserves_particles_without_noise(rng):
    ens = Ensemble(rng.standard_normal((5, 2)))
    out = forecast(identity_model(), ens, rng)
    np.testing.assert_array_equal(out.particles, ens.particles)
    assert len(out) == 5


def test_forecast_variance_clt(rng):
    m = identity_model(1, sigma_proc=1.0)
    out = forecast(m, Ensemble(np.zeros((10_000, 1))), rng)
    assert out.particles.var() == pytest.approx(1.0, rel=0.05)


def test_linear_forecast_moments(rng):
    A = np.array([[0.9, 0.2], [0.0, 0.7]])
    Q = np.diag([0.3, 0.5])
    m = linear_gaussian(A, np.eye(2), Q, np.eye(2), np.zeros(2), np.eye(2))
    mean, P = np.array([1.0, -2.0]), np.array([[1.0, 0.3], [0.3, 0.5]])
    x = mean + rng.standard_normal((10_000, 2)) @ np.linalg.cholesky(P).T
    out = forecast(m, Ensemble(x), rng).particles
    np.testing.assert_allclose(out.mean(axis=0), A @ mean, rtol=0.05, atol=0.05)
    np.testing.assert_allclose(np.cov(out.T), A @ P @ A.T + Q, rtol=0.05, atol=0.02)


def test_ensemble_invariants():
    with pytest.raises(ContractViolation):
        Ensemble(np.zeros((1, 2)))
    with pytest.raises(ContractViolation):
        Ensemble(np.zeros((2, 2)), weights=[0.7, 0.7])
    assert Ensemble(np.array([[0.0], [2.0]]), weights=[0.25, 0.75]).mean()[0] == 1.5
