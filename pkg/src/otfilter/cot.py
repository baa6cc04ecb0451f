"""Conditional optimal transport: max-min training of a map and a potential.

The potential ``psi`` ascends and the map ``T`` descends on

    J(psi, T) = mean[ 1/2 |T(y, v) - v|^2 - psi(y, T(y, v)) + psi(y, u) ]

where ``(y, u)`` are joint samples and ``v`` is a shuffled copy of ``u``.
After training, ``T(Y, .)`` pushes the reference particles to the
conditional law given the observation ``Y``.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import optimize
from sklearn.base import BaseEstimator, TransformerMixin

from . import rng as streams
from .autodiff import engine as ad
from .autodiff.adam import AdamState, adam_update
from .autodiff.nets import MapNet, PotentialNet, QuadraticPotential, laplacian_tensor
from .exceptions import ConjugateUndefinedError, ContractViolation, NumericalError, TrainingDiverged
from .ssm import Ensemble, observe
from ._validation import check_pairs, check_is_fitted_attr

DIVERGENCE_LIMIT = 1e6


@dataclass(frozen=True)
class TrainingBatch:
    """Target pairs ``(y, u)``, reference ``v`` and optional EnKF reference ``w``."""

    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray = None

    def __post_init__(self):
        y, u, v = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in (self.y, self.u, self.v))
        rows = {y.shape[0], u.shape[0], v.shape[0]}
        w = None
        if self.w is not None:
            w = np.atleast_2d(np.asarray(self.w, dtype=np.float64))
            rows.add(w.shape[0])
        if len(rows) != 1:
            raise ContractViolation("batch arrays must share the number of rows")
        if u.shape[1] != v.shape[1] or (w is not None and w.shape[1] != u.shape[1]):
            raise ContractViolation("u, v and w must share the state dimension")
        for name, arr in (("y", y), ("u", u), ("v", v), ("w", w)):
            object.__setattr__(self, name, arr)

    def __len__(self):
        return self.u.shape[0]

    @property
    def reference(self):
        """Samples the map is applied to: ``w`` when present, else ``v``."""
        return self.v if self.w is None else self.w


@dataclass
class TrainConfig:
    """Hyperparameters of the alternating Adam max-min solver.

    ``iterations`` is the budget of the first training call; later filter
    steps use ``max(floor(iterations * decay**t), min_iterations)``.
    ``pair_batch`` caps the number of particles entering the pairwise
    monotonicity penalty (``None`` uses all ``N(N-1)`` pairs) and
    ``penalty_batch`` the particles entering the Laplacian penalty; both
    subsets are redrawn every iteration.
    """

    iterations: int = 1000
    lr_psi: float = 1e-3
    lr_T: float = 1e-3
    lambda_T: float = 0.0
    lambda_psi: float = 0.0
    psi_steps: int = 1
    T_steps: int = 1
    elu_alpha: float = 0.01
    decay: float = 0.9
    min_iterations: int = 100
    warm_start: bool = True
    pair_batch: int = 64
    penalty_batch: int = 256
    hidden: tuple = (64, 64)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    trace_every: int = 1
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.iterations < 1:
            problems.append("iterations must be >= 1")
        if self.lambda_T < 0 or self.lambda_psi < 0:
            problems.append("regularization weights must be >= 0")
        if self.elu_alpha <= 0:
            problems.append("ELU alpha must be > 0")
        if self.psi_steps < 1 or self.T_steps < 1:
            problems.append("step ratio entries must be >= 1")
        if not 0 < self.decay <= 1:
            problems.append("decay must lie in (0, 1]")
        if self.pair_batch is not None and self.pair_batch < 2:
            problems.append("pair_batch must be >= 2")
        if self.penalty_batch is not None and self.penalty_batch < 1:
            problems.append("penalty_batch must be >= 1")
        if self.lr_psi < 0 or self.lr_T < 0:
            problems.append("learning rates must be >= 0")
        if problems:
            raise ContractViolation("; ".join(problems))
        self.hidden = tuple(self.hidden)

    def iterations_at(self, t):
        """Iteration budget for the ``t``-th training call (``t = 0`` is the first)."""
        if t <= 0:
            return self.iterations
        return max(int(math.floor(self.iterations * self.decay**t)), min(self.min_iterations, self.iterations))


@dataclass
class TransportPair:
    """Map ``T`` and potential ``psi`` with their optimizer states.

    ``variant="enkf"`` means ``T`` is the perturbation ``T~`` acting on the
    EnKF-transported reference; the full map is ``w + T~(y, w)``.
    """

    T: MapNet
    psi: PotentialNet
    variant: str = "plain"
    adam_T: AdamState = None
    adam_psi: AdamState = None
    trace: list = field(default_factory=list)

    def full_map(self, y, w, theta=None):
        out = self.T.forward(y, w, theta)
        if self.variant == "enkf":
            return ad.as_tensor(w) + out
        return out

    def apply(self, y, w):
        """Evaluate the full transport map on rows ``(y, w)`` (arrays)."""
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        w = np.atleast_2d(np.asarray(w, dtype=np.float64))
        if y.shape[0] == 1 and w.shape[0] > 1:
            y = np.broadcast_to(y, (w.shape[0], y.shape[1]))
        with ad.no_grad():
            return self.full_map(y, w).data

    def copy(self):
        T = type(self.T)(self.T.obs_dim, self.T.state_dim, hidden=self.T.hidden,
                         activation=self.T.activation, residual=self.T.residual,
                         zero_init_output=self.T.zero_init_output,
                         identity_skip=self.T.identity_skip, params=self.T.params.values.copy())
        psi = type(self.psi)(self.psi.obs_dim, self.psi.state_dim, hidden=self.psi.hidden,
                             activation=self.psi.activation, residual=self.psi.residual,
                             zero_init_output=self.psi.zero_init_output,
                             params=self.psi.params.values.copy())
        return TransportPair(T, psi, self.variant,
                             None if self.adam_T is None else self.adam_T.copy(),
                             None if self.adam_psi is None else self.adam_psi.copy(),
                             list(self.trace))


def init_transport_pair(obs_dim, state_dim, variant="plain", hidden=(64, 64), seed=0):
    """Fresh networks: ``T`` starts at the identity (plain) or at zero (enkf), ``psi`` at zero."""
    if variant not in ("plain", "enkf"):
        raise ContractViolation(f"unknown variant {variant!r}")
    T = MapNet(obs_dim, state_dim, hidden=hidden, zero_init_output=True,
               identity_skip=(variant == "plain"), rng=streams.stream(seed, 0, "net_T"))
    psi = PotentialNet(obs_dim, state_dim, hidden=hidden, zero_init_output=True,
                       rng=streams.stream(seed, 0, "net_psi"))
    return TransportPair(T, psi, variant)


def batch_assemble(ens, model, rng, permutation=None):
    """Build ``(y, u, v)``: simulated observations of the particles and a shuffled copy.

    ``rng`` is a numpy Generator used for the observation noise and, unless
    ``permutation`` is given, the shuffle.
    """
    u = ens.particles if isinstance(ens, Ensemble) else np.atleast_2d(np.asarray(ens, dtype=np.float64))
    N = u.shape[0]
    if N < 2:
        raise ContractViolation("batch assembly needs N >= 2")
    y = observe(model, u, rng.standard_normal((N, model.obs_dim)))
    perm = rng.permutation(N) if permutation is None else np.asarray(permutation)
    return TrainingBatch(y, u, u[perm])


def _value(x):
    return x.data if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)


def _call_map(T, y, v, theta=None):
    if callable(T) and not hasattr(T, "forward"):
        return ad.as_tensor(T(_value(y), _value(v)))
    return T.forward(y, v, theta)


def _call_potential(psi, y, u, theta=None):
    if callable(psi) and not hasattr(psi, "forward"):
        return ad.as_tensor(np.asarray(psi(_value(y), _value(u)), dtype=np.float64).reshape(-1))
    return psi.forward(y, u, theta)


def _finite(x, what):
    if not np.all(np.isfinite(_value(x))):
        raise NumericalError(f"{what} is not finite")
    return x


def objective_J_tensor(psi, T, batch, theta_psi=None, theta_T=None):
    Tv = _call_map(T, batch.y, batch.v, theta_T)
    diff = Tv - batch.v
    terms = (ad.tsum(diff * diff, axis=1) * 0.5 - _call_potential(psi, batch.y, Tv, theta_psi)
             + _call_potential(psi, batch.y, batch.u, theta_psi))
    return ad.mean(terms)


def objective_J(psi, T, batch):
    """Empirical max-min objective; ``psi`` and ``T`` may be nets or plain callables."""
    with ad.no_grad():
        return float(_finite(objective_J_tensor(psi, T, batch), "objective J").data)


def objective_enkf_tensor(psi, T_tilde, batch, theta_psi=None, theta_T=None):
    if batch.w is None:
        raise ContractViolation("EnKF objective needs the transported reference w")
    d = _call_map(T_tilde, batch.y, batch.w, theta_T)
    terms = (_call_potential(psi, batch.y, batch.u, theta_psi) + ad.tsum(d * d, axis=1) * 0.5
             - _call_potential(psi, batch.y, d + batch.w, theta_psi))
    return ad.mean(terms)


def objective_enkf(psi, T_tilde, batch):
    """Objective with EnKF-transported reference ``w`` and perturbation map ``T~``."""
    with ad.no_grad():
        return float(_finite(objective_enkf_tensor(psi, T_tilde, batch), "EnKF objective").data)


def monotone_tensor(full_map, y, v, alpha, theta=None, index=None):
    """Pairwise monotonicity penalty as a graph node.

    ``full_map(y, v, theta)`` returns a Tensor. ``index`` restricts the pairs
    to a particle subset.
    """
    if index is not None:
        y, v = y[index], v[index]
    B, n = v.shape
    if B < 2:
        raise ContractViolation("monotonicity penalty needs at least 2 samples")
    # row i*B + j holds (y_i, v_j)
    yy = np.repeat(y, B, axis=0)
    vv = np.tile(v, (B, 1))
    Tij = ad.reshape(full_map(yy, vv, theta), (B, B, n))
    diag = np.arange(B)
    Tii = ad.reshape(Tij[diag, diag], (B, 1, n))
    dv = v[None, :, :] - v[:, None, :]
    inner = ad.tsum((Tii - Tij) * dv, axis=2)
    return ad.tsum(ad.elu(inner, alpha)) / (B * (B - 1))


def penalty_monotone(T, batch, alpha=0.01, variant="plain"):
    """Mean of ``g_T(<T(y_i,v_i) - T(y_i,v_j), v_j - v_i>)`` over ordered pairs (ELU ``g_T``)."""
    if len(batch) < 2:
        raise ContractViolation("monotonicity penalty needs N >= 2")
    ref = batch.reference

    def full(y, v, theta=None):
        out = _call_map(T, y, v, theta)
        return ad.as_tensor(v) + out if variant == "enkf" else out

    with ad.no_grad():
        return float(monotone_tensor(full, batch.y, ref, alpha).data)


def laplacian_penalty_tensor(psi, y, u, alpha, theta=None):
    lap = laplacian_tensor(psi, y, u, theta)
    return ad.mean(ad.elu(lap * lap, alpha))


def penalty_laplacian(psi, batch, alpha=0.01):
    """Mean of ``g_psi(|Laplacian_u psi(y_i, u_i)|^2)``."""
    return float(laplacian_penalty_tensor(psi, batch.y, batch.u, alpha).data)


def _adam(state, size, lr, cfg):
    if state is None or state.m.shape != (size,):
        return AdamState.zeros(size, lr, cfg.beta1, cfg.beta2, cfg.eps)
    return replace(state, lr=lr)


def train_maxmin(cfg, batch, init, variant=None, iterations=None):
    """Alternating Adam: ascent on ``J - lambda_psi R_psi``, descent on ``J + lambda_T R_T``.

    Returns a new :class:`TransportPair`; ``init`` is not modified. The
    per-iteration trace rows are ``(iteration, J, R_T, R_psi)``.
    """
    variant = init.variant if variant is None else variant
    if variant != init.variant:
        raise ContractViolation(f"pair was built for {init.variant!r}, not {variant!r}")
    if variant == "enkf" and batch.w is None:
        raise ContractViolation("enkf training needs batch.w")
    iterations = cfg.iterations if iterations is None else int(iterations)
    if iterations < 1:
        raise ContractViolation("iterations must be >= 1")

    pair = init.copy()
    pair.trace = []
    pair.adam_T = _adam(pair.adam_T if cfg.warm_start else None, len(pair.T.params), cfg.lr_T, cfg)
    pair.adam_psi = _adam(pair.adam_psi if cfg.warm_start else None, len(pair.psi.params), cfg.lr_psi, cfg)

    y, u, ref = batch.y, batch.u, batch.reference
    N = len(batch)
    base_iter = pair.adam_psi.step
    pair_rng = streams.stream(cfg.seed, base_iter, "pairs")
    sub = cfg.pair_batch is not None and cfg.pair_batch < N
    lap_sub = cfg.penalty_batch is not None and cfg.penalty_batch < N

    def full(yy, vv, theta):
        return pair.full_map(yy, vv, theta)

    for it in range(iterations):
        # potential ascent
        for _ in range(cfg.psi_steps):
            th_psi = pair.psi.theta(requires_grad=True)
            with ad.no_grad():
                Tv = pair.full_map(y, ref)
            with ad.enable_grad():
                psi_u = pair.psi.forward(y, u, th_psi)
                psi_T = pair.psi.forward(y, Tv, th_psi)
                transport = 0.5 * np.sum((Tv.data - ref) ** 2, axis=1).mean()
                J = ad.mean(psi_u - psi_T) + transport
                obj = J
                r_psi = 0.0
                if cfg.lambda_psi > 0:
                    idx = np.sort(pair_rng.choice(N, cfg.penalty_batch, replace=False)) if lap_sub else slice(None)
                    R = laplacian_penalty_tensor(pair.psi, y[idx], u[idx], cfg.elu_alpha, th_psi)
                    r_psi = float(R.data)
                    obj = J - R * cfg.lambda_psi
            g = ad.grad(obj, th_psi).data
            pair.adam_psi, new = adam_update(pair.adam_psi, pair.psi.params, g, "ascent")
            pair.psi.params = new
        J_val = float(J.data)

        # map descent
        for _ in range(cfg.T_steps):
            th_T = pair.T.theta(requires_grad=True)
            with ad.enable_grad():
                Tv = pair.full_map(y, ref, th_T)
                d = Tv - ref
                psi_T = pair.psi.forward(y, Tv)
                obj = ad.mean(ad.tsum(d * d, axis=1) * 0.5 - psi_T)
                r_T = 0.0
                if cfg.lambda_T > 0:
                    idx = np.sort(pair_rng.choice(N, cfg.pair_batch, replace=False)) if sub else None
                    R = monotone_tensor(full, y, ref, cfg.elu_alpha, th_T, idx)
                    r_T = float(R.data)
                    obj = obj + R * cfg.lambda_T
            g = ad.grad(obj, th_T).data
            pair.adam_T, new = adam_update(pair.adam_T, pair.T.params, g, "descent")
            pair.T.params = new

        if not np.isfinite(J_val) or abs(J_val) > DIVERGENCE_LIMIT:
            raise TrainingDiverged(f"max-min objective diverged at iteration {it} (J={J_val:.3g})",
                                   trace=pair.trace)
        if it % cfg.trace_every == 0 or it == iterations - 1:
            pair.trace.append((base_iter + it, J_val, r_T, r_psi))
    return pair


def quadratic_conjugate(phi, y, u):
    """Closed-form conjugate ``1/2 (u - b)^T Q^{-1} (u - b)`` row by row."""
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    out = np.empty(u.shape[0])
    if phi.affine_q:
        for i in range(u.shape[0]):
            out[i] = _conj_one(phi.Q(y[i]), phi.b(y[i]), u[i])
        return out
    Q = phi.Q()
    r = u - phi.b() - y @ phi.params.view("B").T
    Qinv = _safe_inv(Q)
    return 0.5 * np.einsum("ij,jk,ik->i", r, Qinv, r)


def _safe_inv(Q):
    w = np.linalg.eigvalsh(Q)
    if np.min(np.abs(w)) <= 1e-12 * max(1.0, np.max(np.abs(w))):
        raise ConjugateUndefinedError("quadratic potential is singular; conjugate undefined")
    if np.min(w) <= 0:
        raise ConjugateUndefinedError("quadratic potential is not positive definite")
    return np.linalg.inv(Q)


def _conj_one(Q, b, u):
    r = u - b
    return 0.5 * r @ _safe_inv(Q) @ r


def semidual_terms(phi, batch):
    """Per-sample semidual terms ``phi(y_i, v_i) + phi*(y_i, u_i)``."""
    with ad.no_grad():
        pv = phi.forward(batch.y, batch.v).data
    return pv + quadratic_conjugate(phi, batch.y, batch.u)


def semidual_empirical(phi, batch):
    """Empirical semidual of a quadratic potential."""
    return float(np.mean(semidual_terms(phi, batch)))


def fit_quadratic_semidual(y, u, v, floor=1e-6, Q_init=None):
    """Minimize the empirical semidual over ``1/2 u^T Q u + u^T (b0 + B y)``, ``Q`` SPD constant.

    ``Q = L L^T + floor I`` with ``L`` lower triangular; solved by L-BFGS with
    exact gradients (the problem is convex in ``(Q, b)``).
    """
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    u = np.atleast_2d(np.asarray(u, dtype=np.float64))
    v = np.atleast_2d(np.asarray(v, dtype=np.float64))
    N, n = u.shape
    m = y.shape[1]
    tril = np.tril_indices(n)
    Cv = v.T @ v / N
    vy = v.T @ y / N
    vbar = v.mean(axis=0)
    L0 = np.linalg.cholesky(np.eye(n) if Q_init is None else Q_init)

    def unpack(x):
        L = np.zeros((n, n))
        L[tril] = x[: len(tril[0])]
        rest = x[len(tril[0]):]
        return L, rest[:n], rest[n:].reshape(n, m)

    def fun(x):
        L, b0, B = unpack(x)
        Q = L @ L.T + floor * np.eye(n)
        Qinv = np.linalg.inv(Q)
        r = u - b0 - y @ B.T
        Qr = r @ Qinv
        val = 0.5 * np.sum(Cv * Q) + vbar @ b0 + np.sum(vy * B) + 0.5 * np.mean(np.sum(Qr * r, axis=1))
        S = r.T @ r / N
        dQ = 0.5 * Cv - 0.5 * Qinv @ S @ Qinv
        dL = 2.0 * dQ @ L
        db0 = vbar - Qr.mean(axis=0)
        dB = vy - Qr.T @ y / N
        return val, np.concatenate([dL[tril], db0, dB.ravel()])

    x0 = np.concatenate([L0[tril], np.zeros(n), np.zeros(n * m)])
    res = optimize.minimize(fun, x0, jac=True, method="L-BFGS-B",
                            options={"maxiter": 2000, "gtol": 1e-10, "ftol": 1e-15})
    L, b0, B = unpack(res.x)
    return QuadraticPotential(m, n, Q0=L @ L.T + floor * np.eye(n), b0=b0, B=B)


class ConditionalOTMap(TransformerMixin, BaseEstimator):
    """Learn the conditional transport map from joint samples ``(Y, U)``.

    ``fit(Y, U)`` trains on ``(y_i, u_i)`` against a shuffled reference;
    ``transform(V, y=Y)`` maps reference samples ``V`` to the conditional
    law at observation(s) ``Y``.
    """

    def __init__(self, iterations=5000, lr=1e-3, lam=0.0, elu_alpha=0.01, hidden=(64, 64),
                 pair_batch=64, random_state=0):
        self.iterations = iterations
        self.lr = lr
        self.lam = lam
        self.elu_alpha = elu_alpha
        self.hidden = hidden
        self.pair_batch = pair_batch
        self.random_state = random_state

    def _config(self):
        return TrainConfig(iterations=self.iterations, lr_psi=self.lr, lr_T=self.lr,
                           lambda_T=self.lam, lambda_psi=self.lam, elu_alpha=self.elu_alpha,
                           hidden=self.hidden, pair_batch=self.pair_batch, seed=self.random_state)

    def fit(self, Y, U, V=None):
        Y, U = check_pairs(Y, U)
        if V is None:
            V = U[streams.stream(self.random_state, 0, "perm").permutation(U.shape[0])]
        cfg = self._config()
        init = init_transport_pair(Y.shape[1], U.shape[1], "plain", cfg.hidden, self.random_state)
        self.pair_ = train_maxmin(cfg, TrainingBatch(Y, U, V), init)
        self.n_features_in_ = U.shape[1]
        self.trace_ = self.pair_.trace
        return self

    def transform(self, V, y=None):
        check_is_fitted_attr(self, "pair_")
        if y is None:
            raise ContractViolation("transform needs the conditioning observation y")
        V = np.atleast_2d(np.asarray(V, dtype=np.float64))
        return self.pair_.apply(y, V)

    def potential(self, y, U):
        check_is_fitted_attr(self, "pair_")
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
        U = np.atleast_2d(np.asarray(U, dtype=np.float64))
        y = np.broadcast_to(y, (U.shape[0], y.shape[1]))
        with ad.no_grad():
            return self.pair_.psi.forward(y, U).data


class QuadraticSemidual(BaseEstimator):
    """Minimizer of the empirical semidual over quadratic-in-``u`` potentials."""

    def __init__(self, floor=1e-6, random_state=0):
        self.floor = floor
        self.random_state = random_state

    def fit(self, Y, U, V=None):
        Y, U = check_pairs(Y, U)
        if V is None:
            V = U[streams.stream(self.random_state, 0, "perm").permutation(U.shape[0])]
        self.potential_ = fit_quadratic_semidual(Y, U, V, floor=self.floor)
        self.n_features_in_ = U.shape[1]
        return self

    def predict(self, Y, V):
        """Map ``nabla_u phi(y, v) = Q v + b(y)``."""
        check_is_fitted_attr(self, "potential_")
        Y, V = check_pairs(Y, V)
        phi = self.potential_
        return V @ phi.Q().T + phi.b() + Y @ phi.params.view("B").T
