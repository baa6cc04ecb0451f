"""State-space models: dynamics, observation operators, simulation.

All functions accept a single state vector ``(n,)`` or a particle block
``(N, n)`` and return the same layout.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ContractViolation, NumericalOverflowError
from .rng import normals

SYSTEMS = ("lorenz63", "lorenz96", "linear")
OBS_KINDS = ("select", "square", "linear", "constant")
INTEGRATORS = ("euler", "rk4", "map")


def _vec(x, size, name):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        arr = np.full(size, float(arr))
    if arr.shape != (size,):
        raise ContractViolation(f"{name} must have length {size}, got shape {arr.shape}")
    return arr


@dataclass
class StateSpaceModel:
    """Discrete-time model ``U_t = a(U_{t-1}) + sigma_proc V_t``, ``Y_t = h(U_t) + sigma_obs W_t``.

    ``obs_index`` is 1-based, matching how components are usually named
    (``U(1)``, ``U(3)``...). ``truth_init_*`` default to the particle
    initial law when left unset.
    """

    system: str
    state_dim: int
    obs_dim: int
    dt: float = 0.01
    integrator: str = "euler"
    sigma_proc: np.ndarray = 0.0
    obs_kind: str = "select"
    obs_index: tuple = ()
    obs_matrix: np.ndarray = None
    sigma_obs: np.ndarray = 1.0
    init_mean: np.ndarray = 0.0
    init_cov: np.ndarray = None
    truth_init_mean: np.ndarray = None
    truth_init_cov: np.ndarray = None
    truth_noise: bool = True
    transition: np.ndarray = None
    l63_params: tuple = (10.0, 28.0, 8.0 / 3.0)
    forcing: float = 8.0
    name: str = field(default="")

    def __post_init__(self):
        problems = []
        if self.system not in SYSTEMS:
            problems.append(f"unknown system {self.system!r}")
        if self.integrator not in INTEGRATORS:
            problems.append(f"unknown integrator {self.integrator!r}")
        if self.obs_kind not in OBS_KINDS:
            problems.append(f"unknown observation kind {self.obs_kind!r}")
        if int(self.state_dim) < 1 or int(self.obs_dim) < 1:
            problems.append("state_dim and obs_dim must be >= 1")
        if not self.dt > 0:
            problems.append("dt must be > 0")
        if problems:
            raise ContractViolation("; ".join(problems))
        n, m = int(self.state_dim), int(self.obs_dim)
        self.state_dim, self.obs_dim = n, m
        if self.system == "lorenz63" and n != 3:
            raise ContractViolation("lorenz63 has state_dim 3")
        self.sigma_proc = _vec(self.sigma_proc, n, "sigma_proc")
        self.sigma_obs = _vec(self.sigma_obs, m, "sigma_obs")
        if np.any(self.sigma_proc < 0):
            raise ContractViolation("sigma_proc must be >= 0")
        if np.any(self.sigma_obs <= 0):
            raise ContractViolation("sigma_obs must be > 0")
        if self.obs_kind == "select":
            idx = tuple(int(i) for i in self.obs_index)
            if len(idx) != m:
                raise ContractViolation(f"obs_index needs {m} entries, got {len(idx)}")
            if any(i < 1 or i > n for i in idx):
                raise ContractViolation(f"observation indices must lie in [1, {n}], got {idx}")
            self.obs_index = idx
        elif self.obs_kind == "square" and m != n:
            raise ContractViolation("squared observation needs obs_dim == state_dim")
        elif self.obs_kind == "linear":
            H = np.asarray(self.obs_matrix, dtype=np.float64)
            if H.shape != (m, n):
                raise ContractViolation(f"obs_matrix must be {m}x{n}")
            self.obs_matrix = H
        if self.system == "linear":
            A = np.eye(n) if self.transition is None else np.asarray(self.transition, dtype=np.float64)
            if A.ndim == 0:
                A = float(A) * np.eye(n)
            if A.shape != (n, n):
                raise ContractViolation(f"transition must be {n}x{n}")
            self.transition = A
            self.integrator = "map"
        self.init_mean = _vec(self.init_mean, n, "init_mean")
        self.init_cov = _cov(self.init_cov, n)
        if self.truth_init_mean is not None:
            self.truth_init_mean = _vec(self.truth_init_mean, n, "truth_init_mean")
        if self.truth_init_cov is not None:
            self.truth_init_cov = _cov(self.truth_init_cov, n)

    @property
    def obs_cov(self):
        return np.diag(self.sigma_obs**2)

    @property
    def proc_cov(self):
        return np.diag(self.sigma_proc**2)


def _cov(cov, n):
    if cov is None:
        return np.eye(n)
    C = np.asarray(cov, dtype=np.float64)
    if C.ndim == 0:
        return float(C) * np.eye(n)
    if C.ndim == 1:
        return np.diag(_vec(C, n, "covariance diagonal"))
    if C.shape != (n, n):
        raise ContractViolation(f"covariance must be {n}x{n}")
    return C


@dataclass
class Ensemble:
    """Particle cloud ``(N, n)`` with optional normalized weights."""

    particles: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        self.particles = np.atleast_2d(np.asarray(self.particles, dtype=np.float64))
        if self.particles.shape[0] < 2:
            raise ContractViolation("an ensemble needs at least 2 particles")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (self.particles.shape[0],) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
                raise ContractViolation("weights must be a nonnegative simplex vector of length N")
            self.weights = w

    def __len__(self):
        return self.particles.shape[0]

    def mean(self):
        if self.weights is None:
            return self.particles.mean(axis=0)
        return self.weights @ self.particles


@dataclass
class Trajectory:
    """Truth states ``U_1..U_T`` and observations ``Y_1..Y_T``."""

    states: np.ndarray
    observations: np.ndarray
    seed: int
    initial: np.ndarray = None

    def __post_init__(self):
        if self.states.shape[0] != self.observations.shape[0]:
            raise ContractViolation("states and observations must have equal length")

    def __len__(self):
        return self.states.shape[0]


def _check_state(model, u):
    u = np.asarray(u, dtype=np.float64)
    if u.shape[-1] != model.state_dim or u.ndim not in (1, 2):
        raise ContractViolation(f"state must have trailing dimension {model.state_dim}, got {u.shape}")
    return u


def drift_eval(model, u):
    """Deterministic vector field of the model at ``u``.

    For the linear system this is the transition map ``A u`` itself.
    """
    u = _check_state(model, u)
    if model.system == "lorenz63":
        s, r, b = model.l63_params
        x, y, z = u[..., 0], u[..., 1], u[..., 2]
        return np.stack([s * (y - x), x * (r - z) - y, x * y - b * z], axis=-1)
    if model.system == "lorenz96":
        return (np.roll(u, -1, axis=-1) - np.roll(u, 2, axis=-1)) * np.roll(u, 1, axis=-1) - u + model.forcing
    return u @ model.transition.T


def _integrate(model, u):
    if model.system == "linear":
        return u @ model.transition.T
    dt = model.dt
    f = lambda x: drift_eval(model, x)
    if model.integrator == "euler":
        return u + dt * f(u)
    k1 = f(u)
    k2 = f(u + 0.5 * dt * k1)
    k3 = f(u + 0.5 * dt * k2)
    k4 = f(u + dt * k3)
    return u + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def step_dynamics(model, u, noise=None, step=None):
    """Integrate one step and add ``sigma_proc * noise`` (noise is standard normal)."""
    u = _check_state(model, u)
    out = _integrate(model, u)
    if noise is not None:
        out = out + model.sigma_proc * np.asarray(noise, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise NumericalOverflowError("state propagation produced non-finite values", step=step)
    return out


def observe_mean(model, u):
    """Noise-free observation ``h(u)``."""
    u = _check_state(model, u)
    if model.obs_kind == "select":
        return u[..., [i - 1 for i in model.obs_index]]
    if model.obs_kind == "square":
        return 0.5 * u * u
    if model.obs_kind == "linear":
        return u @ model.obs_matrix.T
    return np.zeros(u.shape[:-1] + (model.obs_dim,))


def observe(model, u, noise=None):
    out = observe_mean(model, u)
    if noise is not None:
        out = out + model.sigma_obs * np.asarray(noise, dtype=np.float64)
    return out


def log_likelihood(model, y, u):
    """Gaussian observation log-density up to a constant, one value per row of ``u``."""
    r = (np.asarray(y, dtype=np.float64) - observe_mean(model, u)) / model.sigma_obs
    return -0.5 * np.sum(r * r, axis=-1)


def sample_initial(model, n_particles, seed, truth=False, lanes=None):
    mean = model.truth_init_mean if truth and model.truth_init_mean is not None else model.init_mean
    cov = model.truth_init_cov if truth and model.truth_init_cov is not None else model.init_cov
    z = normals(seed, 0, "truth_init" if truth else "init", (n_particles, model.state_dim), lanes)
    return mean + z @ np.linalg.cholesky(cov).T


def simulate_truth(model, t_steps, seed):
    """Simulate ``t_steps`` truth states and observations from one seed."""
    if t_steps < 1:
        raise ContractViolation("t_steps must be >= 1")
    n, m = model.state_dim, model.obs_dim
    u0 = sample_initial(model, 1, seed, truth=True)[0]
    proc = normals(seed, 0, "truth_proc", (t_steps, n))
    obs = normals(seed, 0, "truth_obs", (t_steps, m))
    states = np.empty((t_steps, n))
    ys = np.empty((t_steps, m))
    u = u0
    for t in range(t_steps):
        u = step_dynamics(model, u, proc[t] if model.truth_noise else None, step=t + 1)
        states[t] = u
        ys[t] = observe(model, u, obs[t])
    return Trajectory(states, ys, seed, initial=u0)


def forecast(model, ens, rng, step=None):
    """Push each particle through the dynamics with fresh process noise.

    ``rng`` is a numpy Generator or a pre-drawn ``(N, n)`` standard normal block.
    """
    particles = ens.particles if isinstance(ens, Ensemble) else np.asarray(ens, dtype=np.float64)
    if isinstance(ens, Ensemble) and ens.weights is not None:
        raise ContractViolation("forecast expects an unweighted ensemble")
    if isinstance(rng, np.ndarray):
        noise = rng
    else:
        noise = rng.standard_normal(particles.shape)
    out = step_dynamics(model, particles, noise, step=step)
    return Ensemble(out) if isinstance(ens, Ensemble) else out


def lorenz63(dt=0.01, sigma_proc=np.sqrt(0.1), obs_var=10.0, **kw):
    """Lorenz 63 observing the third component."""
    kw.setdefault("init_mean", 0.0)
    kw.setdefault("init_cov", 100.0)
    kw.setdefault("truth_init_mean", 5.0)
    kw.setdefault("truth_init_cov", 1.0)
    kw.setdefault("truth_noise", False)
    kw.setdefault("obs_index", (3,))
    return StateSpaceModel("lorenz63", 3, len(kw["obs_index"]), dt=dt, integrator="euler",
                           sigma_proc=sigma_proc, obs_kind="select",
                           sigma_obs=np.sqrt(obs_var), name="lorenz63", **kw)


def lorenz96(n=9, dt=0.01, sigma_proc=np.sqrt(0.1), obs_var=0.1, obs_index=None, **kw):
    """Lorenz 96 observing every third component starting at 1."""
    obs_index = tuple(range(1, n + 1, 3)) if obs_index is None else tuple(obs_index)
    kw.setdefault("init_mean", 10.0)
    kw.setdefault("init_cov", 10.0)
    kw.setdefault("truth_noise", True)
    return StateSpaceModel("lorenz96", n, len(obs_index), dt=dt, integrator="rk4",
                           sigma_proc=sigma_proc, obs_kind="select", obs_index=obs_index,
                           sigma_obs=np.sqrt(obs_var), name="lorenz96", **kw)


def squared_model(n=1, sigma=0.1):
    """Static model ``Y = U*U/2 + sigma W`` with ``U ~ N(0, I)``."""
    return StateSpaceModel("linear", n, n, transition=np.eye(n), sigma_proc=0.0,
                           obs_kind="square", sigma_obs=sigma, init_mean=0.0, init_cov=1.0,
                           name="squared")


def linear_gaussian(A, H, Q, R, m0, P0, truth_noise=True):
    A = np.atleast_2d(A)
    H = np.atleast_2d(H)
    n, m = A.shape[0], H.shape[0]
    return StateSpaceModel("linear", n, m, transition=A, sigma_proc=np.sqrt(np.diag(np.atleast_2d(Q))),
                           obs_kind="linear", obs_matrix=H,
                           sigma_obs=np.sqrt(np.diag(np.atleast_2d(R))),
                           init_mean=m0, init_cov=P0, truth_noise=truth_noise, name="linear")
