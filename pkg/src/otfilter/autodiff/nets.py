"""Map and potential parameterizations over flat parameter vectors."""

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ContractViolation
from . import engine as ad

ACTIVATIONS = {"tanh": ad.tanh}


@dataclass
class ParamVector:
    """Flat parameter array plus a table ``name -> (start, stop, shape)``."""

    values: np.ndarray
    layout: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        cursor = 0
        for name, (start, stop, shape) in self.layout.items():
            if start != cursor or stop - start != int(np.prod(shape)):
                raise ContractViolation(f"layout slice for {name!r} does not tile the vector")
            cursor = stop
        if self.layout and cursor != self.values.size:
            raise ContractViolation("layout does not cover the parameter vector")

    def __len__(self):
        return self.values.size

    def view(self, name):
        start, stop, shape = self.layout[name]
        return self.values[start:stop].reshape(shape)

    def copy(self):
        return ParamVector(self.values.copy(), dict(self.layout))

    def with_values(self, values):
        return ParamVector(np.asarray(values, dtype=np.float64).copy(), dict(self.layout))


def _build_layout(shapes):
    layout, cursor = {}, 0
    for name, shape in shapes:
        size = int(np.prod(shape))
        layout[name] = (cursor, cursor + size, tuple(shape))
        cursor += size
    return layout, cursor


def _unpack(theta, layout, name):
    start, stop, shape = layout[name]
    return ad.reshape(theta[start:stop], shape)


class _MLP:
    """Residual tanh network on ``concat(y, u)``.

    The first hidden layer maps the input to ``hidden[0]``; every following
    layer of equal width is a residual block ``h + act(h W + b)``.
    """

    def __init__(self, obs_dim, state_dim, out_dim, hidden=(64, 64), activation="tanh",
                 residual=True, zero_init_output=False, rng=None, params=None):
        if activation not in ACTIVATIONS:
            raise ContractViolation(f"unknown activation {activation!r}")
        self.obs_dim = int(obs_dim)
        self.state_dim = int(state_dim)
        self.out_dim = int(out_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.activation = activation
        self.residual = bool(residual)
        self.zero_init_output = bool(zero_init_output)

        widths = (self.obs_dim + self.state_dim,) + self.hidden
        shapes = []
        for k in range(len(self.hidden)):
            shapes += [(f"W{k}", (widths[k], widths[k + 1])), (f"b{k}", (widths[k + 1],))]
        shapes += [("Wout", (widths[-1], self.out_dim)), ("bout", (self.out_dim,))]
        layout, size = _build_layout(shapes)

        if params is not None:
            values = params.values if isinstance(params, ParamVector) else params
            self.params = ParamVector(np.array(values, dtype=np.float64), layout)
            return
        rng = np.random.default_rng(rng)
        values = np.zeros(size)
        pv = ParamVector(values, layout)
        for k in range(len(self.hidden)):
            fan_in, fan_out = widths[k], widths[k + 1]
            scale = np.sqrt(2.0 / (fan_in + fan_out))
            pv.view(f"W{k}")[...] = rng.normal(0.0, scale, (fan_in, fan_out))
        if not self.zero_init_output:
            scale = np.sqrt(2.0 / (widths[-1] + self.out_dim))
            pv.view("Wout")[...] = rng.normal(0.0, scale, (widths[-1], self.out_dim))
        self.params = pv

    @property
    def input_dim(self):
        return self.obs_dim + self.state_dim

    def architecture(self):
        return {
            "kind": type(self).__name__,
            "obs_dim": self.obs_dim,
            "state_dim": self.state_dim,
            "hidden": list(self.hidden),
            "activation": self.activation,
            "residual": self.residual,
            "zero_init_output": self.zero_init_output,
        }

    def theta(self, requires_grad=False):
        return ad.Tensor(self.params.values, requires_grad=requires_grad)

    def _check(self, y, u):
        if y.shape[-1] != self.obs_dim or u.shape[-1] != self.state_dim:
            raise ContractViolation(
                f"expected y dim {self.obs_dim} and u dim {self.state_dim}, "
                f"got {y.shape[-1]} and {u.shape[-1]}"
            )

    def _body(self, y, u, theta):
        act = ACTIVATIONS[self.activation]
        layout = self.params.layout
        h = ad.concat([y, u], axis=1)
        for k in range(len(self.hidden)):
            W = _unpack(theta, layout, f"W{k}")
            b = _unpack(theta, layout, f"b{k}")
            z = act(h @ W + b)
            h = h + z if (self.residual and k > 0 and h.shape[1] == z.shape[1]) else z
        return h @ _unpack(theta, layout, "Wout") + _unpack(theta, layout, "bout")


class MapNet(_MLP):
    """Map ``T(y, u)`` with values in the state space.

    With ``identity_skip`` the network models a displacement and returns
    ``u + net(y, u)``; combined with ``zero_init_output`` it starts as the
    identity map.
    """

    def __init__(self, obs_dim, state_dim, hidden=(64, 64), activation="tanh",
                 residual=True, zero_init_output=False, identity_skip=False, rng=None,
                 params=None):
        super().__init__(obs_dim, state_dim, state_dim, hidden, activation, residual,
                         zero_init_output, rng, params)
        self.identity_skip = bool(identity_skip)

    def architecture(self):
        arch = super().architecture()
        arch["identity_skip"] = self.identity_skip
        return arch

    def forward(self, y, u, theta=None):
        y, u = ad.as_tensor(y), ad.as_tensor(u)
        self._check(y, u)
        theta = self.theta() if theta is None else theta
        out = self._body(y, u, theta)
        return u + out if self.identity_skip else out


class PotentialNet(_MLP):
    """Scalar potential ``psi(y, u)``; ``forward`` returns shape ``(N,)``."""

    def __init__(self, obs_dim, state_dim, hidden=(64, 64), activation="tanh",
                 residual=True, zero_init_output=True, rng=None, params=None):
        super().__init__(obs_dim, state_dim, 1, hidden, activation, residual,
                         zero_init_output, rng, params)

    def forward(self, y, u, theta=None):
        y, u = ad.as_tensor(y), ad.as_tensor(u)
        self._check(y, u)
        theta = self.theta() if theta is None else theta
        return ad.reshape(self._body(y, u, theta), (y.shape[0],))


class QuadraticPotential:
    """``phi(y, u) = 1/2 u^T Q(y) u + u^T b(y)`` with ``Q, b`` affine in ``y``.

    ``Q(y) = sym(Q0) + sum_k y_k sym(Q_k)`` (the ``Q_k`` only when
    ``affine_q``) and ``b(y) = b0 + B y``. With ``constrained`` set, the
    eigenvalues of ``Q(y)`` are clipped into ``[sigma_min, sigma_max]`` when
    evaluated (clipping is not differentiated through; it is a projection).
    """

    def __init__(self, obs_dim, state_dim, Q0=None, b0=None, B=None, Qy=None,
                 affine_q=False, constrained=False, sigma_min=None, sigma_max=None,
                 params=None):
        self.obs_dim = int(obs_dim)
        self.state_dim = int(state_dim)
        self.affine_q = bool(affine_q) or Qy is not None
        self.constrained = bool(constrained)
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        if self.constrained and (sigma_min is None or sigma_max is None or sigma_min > sigma_max):
            raise ContractViolation("constrained quadratic needs sigma_min <= sigma_max")
        n, m = self.state_dim, self.obs_dim
        shapes = [("Q0", (n, n)), ("b0", (n,)), ("B", (n, m))]
        if self.affine_q:
            shapes.append(("Qy", (m, n, n)))
        layout, size = _build_layout(shapes)
        if params is not None:
            values = params.values if isinstance(params, ParamVector) else params
            self.params = ParamVector(np.array(values, dtype=np.float64), layout)
            return
        pv = ParamVector(np.zeros(size), layout)
        pv.view("Q0")[...] = np.eye(n) if Q0 is None else Q0
        if b0 is not None:
            pv.view("b0")[...] = b0
        if B is not None:
            pv.view("B")[...] = B
        if Qy is not None:
            pv.view("Qy")[...] = Qy
        self.params = pv

    def architecture(self):
        return {
            "kind": "QuadraticPotential",
            "obs_dim": self.obs_dim,
            "state_dim": self.state_dim,
            "affine_q": self.affine_q,
            "constrained": self.constrained,
            "sigma_min": self.sigma_min,
            "sigma_max": self.sigma_max,
        }

    def theta(self, requires_grad=False):
        return ad.Tensor(self.params.values, requires_grad=requires_grad)

    def _project(self, Q):
        if not self.constrained:
            return Q
        w, V = np.linalg.eigh(Q)
        return (V * np.clip(w, self.sigma_min, self.sigma_max)) @ V.T

    def Q(self, y=None):
        """Symmetric matrix ``Q(y)`` (array, no graph)."""
        Q0 = self.params.view("Q0")
        Q = 0.5 * (Q0 + Q0.T)
        if self.affine_q and y is not None:
            Qy = self.params.view("Qy")
            Q = Q + np.einsum("k,kij->ij", np.asarray(y, dtype=float), 0.5 * (Qy + Qy.transpose(0, 2, 1)))
        return self._project(Q)

    def b(self, y=None):
        b = self.params.view("b0").copy()
        if y is not None:
            b = b + self.params.view("B") @ np.asarray(y, dtype=float)
        return b

    def forward(self, y, u, theta=None):
        y, u = ad.as_tensor(y), ad.as_tensor(u)
        if u.shape[-1] != self.state_dim or y.shape[-1] != self.obs_dim:
            raise ContractViolation("dimension mismatch for quadratic potential")
        theta = self.theta() if theta is None else theta
        layout = self.params.layout
        Q0 = _unpack(theta, layout, "Q0")
        Q0 = (Q0 + Q0.T) * 0.5
        if self.constrained and not self.affine_q:
            Q0 = ad.Tensor(self._project(Q0.data))
        quad = ad.tsum((u @ Q0) * u, axis=1)
        if self.affine_q:
            Qy = _unpack(theta, layout, "Qy")
            for k in range(self.obs_dim):
                Qk = ad.reshape(Qy[k], (self.state_dim, self.state_dim))
                Qk = (Qk + Qk.T) * 0.5
                quad = quad + ad.tsum((u @ Qk) * u, axis=1) * y[:, k]
        b = _unpack(theta, layout, "b0") + y @ _unpack(theta, layout, "B").T
        return quad * 0.5 + ad.tsum(u * b, axis=1)


def _as_batch(y, u):
    y = np.asarray(y, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    single = u.ndim == 1
    return np.atleast_2d(y), np.atleast_2d(u), single


def eval_map(net, y, u):
    """Evaluate ``T(y, u)`` for one pair (1-d inputs) or a batch of rows."""
    y2, u2, single = _as_batch(y, u)
    with ad.no_grad():
        out = net.forward(y2, u2).data
    return out[0] if single else out


def eval_potential(potential, y, u):
    y2, u2, single = _as_batch(y, u)
    with ad.no_grad():
        out = potential.forward(y2, u2).data
    return float(out[0]) if single else out


def grad_u_tensor(potential, y, u, theta=None, create_graph=False):
    """Input gradient ``nabla_u psi`` as a Tensor of shape ``(N, n)``."""
    u = ad.Tensor(u.data if isinstance(u, ad.Tensor) else u, requires_grad=True)
    with ad.enable_grad():
        out = ad.tsum(potential.forward(y, u, theta))
    return ad.grad(out, u, create_graph=create_graph)


def grad_u(potential, y, u):
    """Exact reverse-mode gradient of the potential in ``u``."""
    y2, u2, single = _as_batch(y, u)
    g = grad_u_tensor(potential, y2, u2).data
    return g[0] if single else g


def default_step(u):
    u = np.atleast_2d(u)
    return 1e-3 * (1.0 + np.linalg.norm(u, axis=1))


def laplacian_tensor(potential, y, u, theta=None, h=None):
    """Laplacian in ``u`` by central differences of exact input gradients.

    Returned as a graph node (shape ``(N,)``) differentiable w.r.t. ``theta``.
    """
    y = np.asarray(y.data if isinstance(y, ad.Tensor) else y, dtype=np.float64)
    u = np.asarray(u.data if isinstance(u, ad.Tensor) else u, dtype=np.float64)
    N, n = u.shape
    h = default_step(u) if h is None else np.broadcast_to(np.asarray(h, dtype=float), (N,))
    eye = np.eye(n)
    # rows ordered (sign, coordinate, particle)
    shifts = np.concatenate([eye, -eye])[:, None, :] * h[None, :, None]
    u_shift = (u[None, :, :] + shifts).reshape(2 * n * N, n)
    y_shift = np.broadcast_to(y, (2 * n,) + y.shape).reshape(2 * n * N, y.shape[1])
    g = grad_u_tensor(potential, y_shift, u_shift, theta, create_graph=True)
    g = ad.reshape(g, (2, n, N, n))
    diag = np.arange(n)
    plus = g[0, diag, :, diag]
    minus = g[1, diag, :, diag]
    return ad.tsum(plus - minus, axis=0) / (2.0 * h)


def laplacian_u(potential, y, u, h=None):
    """Scalar (or per-row) Laplacian of the potential in ``u``."""
    y2, u2, single = _as_batch(y, u)
    if h is not None and np.ndim(h) == 0 and h <= 0:
        raise ContractViolation("finite-difference step must be positive")
    out = laplacian_tensor(potential, y2, u2, h=h).data
    return float(out[0]) if single else out
