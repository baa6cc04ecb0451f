import numpy as np
import pytest

from otfilter import autodiff as ad
from otfilter.autodiff import (AdamState, MapNet, ParamVector, PotentialNet, QuadraticPotential, Tensor,
                               adam_update, backprop, eval_map, eval_potential, grad_u, laplacian_u)
from otfilter.autodiff import engine
from otfilter.exceptions import ContractViolation, NumericalError


def fd_param_grad(loss_of_theta, theta, h=1e-6):
    g = np.zeros_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        g[k] = (loss_of_theta(theta + e) - loss_of_theta(theta - e)) / (2 * h)
    return g


def test_zero_init_map_is_zero(rng):
    net = MapNet(2, 3, hidden=(8, 8), zero_init_output=True, rng=rng)
    y, u = rng.standard_normal((40, 2)), rng.standard_normal((40, 3))
    assert np.all(eval_map(net, y, u) == 0.0)


def test_identity_weights_return_u():
    net = MapNet(1, 2, hidden=(), rng=0)
    net.params.view("Wout")[...] = np.eye(3)[:, 1:]
    u = np.array([0.4, -1.2])
    np.testing.assert_array_equal(eval_map(net, np.array([5.0]), u), u)


def test_map_weight_perturbation_matches_jacobian(rng):
    net = MapNet(1, 2, hidden=(6, 6), rng=rng)
    y, u = rng.standard_normal((1, 1)), rng.standard_normal((1, 2))
    k = 3
    theta = net.theta(requires_grad=True)
    with engine.enable_grad():
        out = net.forward(y, u, theta)
    col = np.stack([ad.grad(engine.tsum(out[:, j]), theta).data[k] for j in range(2)])
    h = 1e-6
    vals = net.params.values.copy()
    vals[k] += h
    bumped = MapNet(1, 2, hidden=(6, 6), params=vals)
    change = (eval_map(bumped, y, u) - eval_map(net, y, u))[0] / h
    np.testing.assert_allclose(change, col, rtol=1e-4, atol=1e-8)


def test_quadratic_potential_values():
    assert eval_potential(QuadraticPotential(1, 2), np.zeros(1), np.ones(2)) == pytest.approx(1.0)
    q = QuadraticPotential(1, 2, Q0=2 * np.eye(2), b0=np.array([1.0, 0.0]))
    assert eval_potential(q, np.zeros(1), np.array([1.0, 0.0])) == pytest.approx(2.0)


def test_zero_param_mlp_potential():
    net = PotentialNet(1, 2, hidden=(4, 4), zero_init_output=True, rng=0)
    net.params = net.params.with_values(np.zeros(len(net.params)))
    assert eval_potential(net, np.ones(1), np.ones(2)) == 0.0


def test_grad_u_examples(rng):
    u = rng.standard_normal(3)
    np.testing.assert_allclose(grad_u(QuadraticPotential(1, 3), np.zeros(1), u), u)
    const = QuadraticPotential(1, 3, Q0=np.zeros((3, 3)))
    np.testing.assert_array_equal(grad_u(const, np.zeros(1), u), np.zeros(3))


def test_grad_u_matches_finite_differences(rng):
    net = PotentialNet(2, 3, hidden=(8, 8), zero_init_output=False, rng=rng)
    y, u = rng.standard_normal((4, 2)), rng.standard_normal((4, 3))
    g = grad_u(net, y, u)
    h = 1e-5
    fd = np.zeros_like(u)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        fd[:, k] = (eval_potential(net, y, u + e) - eval_potential(net, y, u - e)) / (2 * h)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) <= 1e-5


@pytest.mark.parametrize("Q, expected", [(np.eye(2), 2.0), (np.diag([1.0, 3.0]), 4.0),
                                         (np.zeros((2, 2)), 0.0)])
def test_laplacian_of_quadratics(Q, expected, rng):
    q = QuadraticPotential(1, 2, Q0=Q, b0=np.array([0.5, -1.0]))
    assert laplacian_u(q, np.zeros(1), rng.standard_normal(2), h=1e-3) == pytest.approx(expected, abs=1e-8)


def test_laplacian_rejects_bad_step():
    with pytest.raises(ContractViolation):
        laplacian_u(QuadraticPotential(1, 1), np.zeros(1), np.zeros(1), h=0.0)


def test_backprop_quadratic_b_gradient(rng):
    q = QuadraticPotential(1, 3)
    u = rng.standard_normal((1, 3))
    theta = q.theta(requires_grad=True)
    with engine.enable_grad():
        loss = engine.tsum(q.forward(np.zeros((1, 1)), u, theta))
    start, stop, _ = q.params.layout["b0"]
    np.testing.assert_allclose(backprop(loss, theta)[start:stop], u[0])


def test_backprop_zero_loss():
    theta = Tensor(np.ones(4), requires_grad=True)
    with engine.enable_grad():
        loss = engine.tsum(theta) * 0.0
    np.testing.assert_array_equal(backprop(loss, theta), np.zeros(4))


def test_backprop_mlp_matches_finite_differences(rng):
    net = PotentialNet(1, 2, hidden=(5, 5), zero_init_output=False, rng=rng)
    y, u = rng.standard_normal((6, 1)), rng.standard_normal((6, 2))

    def loss(values):
        with ad.no_grad():
            return float(engine.mean(engine.square(net.forward(y, u, Tensor(values)))).data)

    theta = net.theta(requires_grad=True)
    with engine.enable_grad():
        L = engine.mean(engine.square(net.forward(y, u, theta)))
    g = backprop(L, theta)
    fd = fd_param_grad(loss, net.params.values)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) <= 1e-5


def test_backprop_nan_reports_node():
    theta = Tensor(np.array([-1.0]), requires_grad=True)
    with engine.enable_grad():
        loss = engine.tsum(theta * np.nan)
    with pytest.raises(NumericalError):
        backprop(loss, theta)


def test_adam_first_step():
    st = AdamState.zeros(1, lr=1e-3)
    _, p = adam_update(st, np.array([1.0]), np.array([1.0]))
    assert p[0] == pytest.approx(1.0 - 1e-3, abs=1e-9)
    _, p = adam_update(st, np.array([1.0]), np.array([0.0]))
    assert p[0] == 1.0


def test_adam_ascent_negates_descent(rng):
    st = AdamState.zeros(5)
    x = rng.standard_normal(5)
    g = rng.standard_normal(5)
    _, down = adam_update(st, x, g, "descent")
    _, up = adam_update(st, x, g, "ascent")
    np.testing.assert_array_equal(down - x, -(up - x))


def test_adam_shape_mismatch():
    with pytest.raises(ContractViolation):
        adam_update(AdamState.zeros(2), np.zeros(3), np.zeros(3))


def test_param_vector_layout_must_tile():
    with pytest.raises(ContractViolation):
        ParamVector(np.zeros(4), {"a": (0, 2, (2,)), "b": (3, 4, (1,))})
    pv = ParamVector(np.arange(4.0), {"a": (0, 2, (2,)), "b": (2, 4, (2, 1))})
    assert pv.view("b").shape == (2, 1)


def test_map_dimension_mismatch():
    with pytest.raises(ContractViolation):
        eval_map(MapNet(1, 2, hidden=(4,)), np.zeros(2), np.zeros(2))


def test_constrained_quadratic_eigenvalues(rng):
    Qy = rng.standard_normal((2, 3, 3))
    q = QuadraticPotential(2, 3, Q0=np.diag([0.1, 1.0, 10.0]), Qy=Qy, constrained=True,
                           sigma_min=0.5, sigma_max=2.0)
    for _ in range(20):
        w = np.linalg.eigvalsh(q.Q(rng.standard_normal(2) * 3))
        assert w.min() >= 0.5 - 1e-12 and w.max() <= 2.0 + 1e-12
