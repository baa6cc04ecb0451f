"""Particle filters: OT filter (plain and EnKF-referenced), stochastic EnKF, SIR.

Time convention: initial particles are drawn from the prior and pushed
through the dynamics once before the first observation, so the forecast
ensemble at step ``t`` (1-based) is conditioned on ``Y_1 .. Y_{t-1}`` and the
posterior at step ``t`` on ``Y_1 .. Y_t``. All random draws are keyed by
``(seed, t, role)`` through :mod:`otfilter.rng`.
"""

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import rng as streams
from .cot import (
    TrainConfig,
    TrainingBatch,
    init_transport_pair,
    train_maxmin,
)
from .exceptions import ContractViolation, DegeneracyError, LinAlgError, NumericalError, TrainingDiverged
from .ssm import Ensemble, log_likelihood, observe, sample_initial, step_dynamics

FILTER_KINDS = ("otf", "otf_enkf", "enkf", "sir")


def _particles(ens):
    return ens.particles if isinstance(ens, Ensemble) else np.atleast_2d(np.asarray(ens, dtype=np.float64))


def enkf_gain(u, y_sim, jitter=1e-8):
    """Empirical gain ``Cov(u, y) Cov(y)^{-1}`` with trace-scaled jitter on ``Cov(y)``."""
    u = _particles(u)
    y_sim = np.atleast_2d(np.asarray(y_sim, dtype=np.float64))
    N = u.shape[0]
    if N < 2 or y_sim.shape[0] != N:
        raise ContractViolation("gain needs N >= 2 matching state and observation rows")
    du = u - u.mean(axis=0)
    dy = y_sim - y_sim.mean(axis=0)
    C_uy = du.T @ dy / (N - 1)
    C_yy = dy.T @ dy / (N - 1)
    m = C_yy.shape[0]
    C_yy = C_yy + jitter * max(np.trace(C_yy), 1e-300) / m * np.eye(m)
    try:
        K = np.linalg.solve(C_yy, C_uy.T).T
    except np.linalg.LinAlgError as exc:
        raise LinAlgError(f"observation covariance singular after jitter: {exc}") from exc
    if not np.all(np.isfinite(K)):
        raise LinAlgError("EnKF gain is not finite")
    return K


def enkf_analysis(ens, gain, Y, y_sim):
    """Stochastic EnKF update ``w_i = v_i + K (Y - y_i)``."""
    v = _particles(ens)
    y_sim = np.atleast_2d(np.asarray(y_sim, dtype=np.float64))
    Y = np.asarray(Y, dtype=np.float64)
    if y_sim.shape[0] != v.shape[0] or gain.shape != (v.shape[1], y_sim.shape[1]):
        raise ContractViolation("EnKF analysis shapes are inconsistent")
    out = v + (Y - y_sim) @ gain.T
    return Ensemble(out) if isinstance(ens, Ensemble) else out


def sir_weights(model, Y, particles):
    """Normalized likelihood weights; raises :class:`DegeneracyError` if all vanish."""
    logw = log_likelihood(model, Y, particles)
    top = np.max(logw)
    if not np.isfinite(top):
        raise DegeneracyError(float(top))
    w = np.exp(logw - top)
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        raise DegeneracyError(float(top))
    return w / total


def resample(weights, rng, systematic=False):
    """Indices drawn multinomially (default) or systematically from ``weights``."""
    N = weights.shape[0]
    cdf = np.cumsum(weights)
    cdf[-1] = 1.0
    if systematic:
        points = (rng.random() + np.arange(N)) / N
    else:
        points = rng.random(N)
    return np.searchsorted(cdf, points, side="right")


def sir_step(ens, model, Y, rng, step=None, systematic=False):
    """Forecast, weight by the observation likelihood, resample to equal weights."""
    u = _particles(ens)
    u = step_dynamics(model, u, rng.standard_normal(u.shape), step=step)
    w = sir_weights(model, Y, u)
    out = u[resample(w, rng, systematic)]
    return Ensemble(out) if isinstance(ens, Ensemble) else out


@dataclass
class FilterConfig:
    """Per-filter settings; ``train`` only matters for the OT filters."""

    n_particles: int = 250
    train: TrainConfig = field(default_factory=TrainConfig)
    jitter: float = 1e-8
    systematic: bool = False
    ideal: bool = False
    snapshot_stride: int = 1
    keep_pairs: bool = False
    freeze_map: bool = False

    def __post_init__(self):
        if self.n_particles < 2:
            raise ContractViolation("n_particles must be >= 2")
        if self.snapshot_stride < 1:
            raise ContractViolation("snapshot_stride must be >= 1")


@dataclass
class FilterState:
    """Forecast particles ``u``, shuffled reference ``v``, simulated observations ``y``."""

    u: np.ndarray
    v: np.ndarray
    y: np.ndarray
    pair: object = None
    t: int = 1
    posterior: np.ndarray = None
    gain: np.ndarray = None

    def __post_init__(self):
        if not (self.u.shape[0] == self.v.shape[0] == self.y.shape[0]):
            raise ContractViolation("filter state ensembles must share N")


@dataclass
class FilterRun:
    """Outcome of one filter run."""

    kind: str
    seed: int
    means: np.ndarray
    observations: np.ndarray
    ensembles: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)
    wall_clock: list = field(default_factory=list)
    config_hash: str = ""
    pairs: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.means.shape[0] != self.observations.shape[0]:
            raise ContractViolation("one posterior mean per observation step is required")

    @property
    def t_steps(self):
        return self.means.shape[0]

    def ensemble(self, t):
        """Posterior particles stored for step ``t`` (1-based)."""
        return self.ensembles[t]

    def digest(self):
        h = hashlib.sha256()
        h.update(self.kind.encode())
        h.update(np.ascontiguousarray(self.means).tobytes())
        for t in sorted(self.ensembles):
            h.update(np.ascontiguousarray(self.ensembles[t]).tobytes())
        return h.hexdigest()


def _obs_noise(seed, t, model, N, role="obs", lanes=None):
    return streams.normals(seed, t, role, (N, model.obs_dim), lanes)


def _forecast(model, particles, seed, t, lanes=None):
    noise = streams.normals(seed, t, "proc", particles.shape, lanes)
    return step_dynamics(model, particles, noise, step=t)


def _permutation(seed, t, N, lanes=None):
    """Shuffle for step ``t``; with ``lanes`` it is conjugated so pairs follow their lanes."""
    perm = streams.stream(seed, t, "perm").permutation(N)
    if lanes is None:
        return perm
    lanes = np.asarray(lanes)
    inv = np.empty_like(lanes)
    inv[lanes] = np.arange(N)
    return inv[perm[lanes]]


def _resample_lanes(weights, rng, systematic, lanes=None):
    """Resampling indices computed in canonical lane order, so they follow particle lanes."""
    if lanes is None:
        return resample(weights, rng, systematic)
    lanes = np.asarray(lanes)
    inv = np.empty_like(lanes)
    inv[lanes] = np.arange(lanes.size)
    return inv[resample(weights[inv], rng, systematic)[lanes]]


def init_state(model, n_particles, seed, variant="plain", train=None, lanes=None):
    """Sample the prior, forecast once, simulate observations and shuffle."""
    x = sample_initial(model, n_particles, seed, lanes=lanes)
    u = _forecast(model, x, seed, 1, lanes)
    y = observe(model, u, _obs_noise(seed, 1, model, n_particles, lanes=lanes))
    perm = _permutation(seed, 1, n_particles, lanes)
    pair = None
    if train is not None:
        pair = init_transport_pair(model.obs_dim, model.state_dim, variant, train.hidden, train.seed)
    return FilterState(u, u[perm], y, pair, 1)


def _ideal_samples(model, pairs, observations, seed, t, N, salt):
    """Fresh samples pushed through every stored map (independent re-simulation)."""
    x = sample_initial(model, N, seed * 7919 + salt)
    u = step_dynamics(model, x, streams.normals(seed * 7919 + salt, 1, "proc", x.shape), step=1)
    for tau in range(1, t):
        u = pairs[tau].apply(observations[tau - 1], u)
        u = step_dynamics(model, u, streams.normals(seed * 7919 + salt, tau + 1, "proc", u.shape), step=tau + 1)
    return u


def otf_step(state, model, Y, cfg, variant="plain", seed=0, history=None, observations=None,
             lanes=None):
    """One OT-filter step: train on the current batch, transport, forecast.

    Returns the next :class:`FilterState`; its ``posterior`` field holds the
    analysis particles of step ``state.t``.
    """
    if state.pair is None:
        raise ContractViolation("otf_step needs an initialized or warm-started TransportPair")
    train = cfg.train if isinstance(cfg, FilterConfig) else cfg
    fcfg = cfg if isinstance(cfg, FilterConfig) else FilterConfig(n_particles=state.u.shape[0], train=train)
    t = state.t
    N = state.u.shape[0]
    u, y, v = state.u, state.y, state.v
    if fcfg.ideal and variant == "plain" and history is not None and t > 1:
        u = _ideal_samples(model, history, observations, seed, t, N, 1)
        v = _ideal_samples(model, history, observations, seed, t, N, 2)
        y = observe(model, u, _obs_noise(seed, t, model, N))
    gain = None
    if variant == "enkf":
        gain = enkf_gain(u, y, fcfg.jitter)
        y_bar = observe(model, v, _obs_noise(seed, t, model, N, "ref_obs", lanes))
        batch = TrainingBatch(y, u, v, enkf_analysis(v, gain, y, y_bar))
    else:
        batch = TrainingBatch(y, u, v)

    pair = state.pair
    if not fcfg.freeze_map:
        try:
            pair = train_maxmin(train, batch, pair, variant, iterations=train.iterations_at(t - 1))
        except TrainingDiverged as exc:
            raise TrainingDiverged(str(exc), exc.trace, step=t) from exc
        except NumericalError as exc:
            raise NumericalError(str(exc), step=t) from exc

    Ys = np.broadcast_to(np.asarray(Y, dtype=np.float64), (N, model.obs_dim))
    if variant == "enkf":
        w_Y = enkf_analysis(state.u, gain, Y, state.y)
        posterior = w_Y if fcfg.freeze_map else pair.apply(Ys, w_Y)
    else:
        posterior = pair.apply(Ys, u)
    if not np.all(np.isfinite(posterior)):
        raise NumericalError("transported particles are not finite", step=t)

    u_next = _forecast(model, posterior, seed, t + 1, lanes)
    y_next = observe(model, u_next, _obs_noise(seed, t + 1, model, N, lanes=lanes))
    perm = _permutation(seed, t + 1, N, lanes)
    if not train.warm_start:
        pair = init_transport_pair(model.obs_dim, model.state_dim, variant, train.hidden, train.seed + t)
    return FilterState(u_next, u_next[perm], y_next, pair, t + 1, posterior, gain)


def _config_hash(kind, model, cfg, seed):
    payload = {"kind": kind, "seed": int(seed), "model": repr(model), "cfg": repr(cfg)}
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def run_filter(kind, model, observations, cfg=None, seed=0, truth=None, reference=None,
               metric_fn=None, lanes=None):
    """Run one filter over an observation sequence.

    Parameters
    ----------
    kind : {"otf", "otf_enkf", "enkf", "sir"}
    observations : array ``(T, m)``
    truth : optional ``(T, n)`` truth states; adds per-step ``mse`` rows.
    reference : optional mapping ``t -> samples`` of a reference posterior;
        ``metric_fn(posterior, reference_samples)`` turns each pair into a
        list of ``(metric, value)`` rows.
    lanes : optional permutation of particle lanes (all random draws are
        reordered by it), used to check exchangeability.
    """
    if kind not in FILTER_KINDS:
        raise ContractViolation(f"unknown filter kind {kind!r}; expected one of {FILTER_KINDS}")
    observations = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    if observations.shape[0] == 0:
        raise ContractViolation("observations must be nonempty")
    if observations.shape[1] != model.obs_dim:
        raise ContractViolation("observation dimension does not match the model")
    cfg = FilterConfig() if cfg is None else cfg
    N = cfg.n_particles
    T = observations.shape[0]
    variant = "enkf" if kind == "otf_enkf" else "plain"
    ot = kind in ("otf", "otf_enkf")

    run = FilterRun(kind, seed, np.zeros((T, model.state_dim)), observations,
                    config_hash=_config_hash(kind, model, cfg, seed))
    state = init_state(model, N, seed, variant, cfg.train if ot else None, lanes)
    history = {}
    for t in range(1, T + 1):
        tic = time.perf_counter()
        Y = observations[t - 1]
        if ot:
            nxt = otf_step(state, model, Y, cfg, variant, seed, history if cfg.ideal else None,
                           observations, lanes)
            post = nxt.posterior
            if cfg.ideal:
                history[t] = nxt.pair
            if cfg.keep_pairs:
                run.pairs[t] = nxt.pair
            run.traces[t] = nxt.pair.trace
            state = nxt
        else:
            u = state.u
            if kind == "enkf":
                y = state.y
                post = enkf_analysis(u, enkf_gain(u, y, cfg.jitter), Y, y)
            else:
                w = sir_weights(model, Y, u)
                post = u[_resample_lanes(w, streams.stream(seed, t, "resample"), cfg.systematic, lanes)]
            u_next = _forecast(model, post, seed, t + 1, lanes)
            y_next = observe(model, u_next, _obs_noise(seed, t + 1, model, N, lanes=lanes))
            state = FilterState(u_next, u_next, y_next, None, t + 1)
        run.wall_clock.append(time.perf_counter() - tic)
        run.means[t - 1] = post.mean(axis=0)
        if t % cfg.snapshot_stride == 0 or t == T:
            run.ensembles[t] = post
        if truth is not None:
            err = run.means[t - 1] - np.asarray(truth)[t - 1]
            run.metrics.append((t, "MSE", float(err @ err / model.state_dim)))
        if reference is not None and metric_fn is not None and t in reference:
            for name, value in metric_fn(post, reference[t]):
                run.metrics.append((t, name, float(value)))
    return run


class ParticleFilter(BaseEstimator):
    """Estimator wrapper: ``fit(observations)`` runs the filter.

    After fitting, ``means_`` holds posterior means ``(T, n)`` and ``run_``
    the full :class:`FilterRun`; ``predict()`` returns the means.
    """

    def __init__(self, model=None, kind="otf", n_particles=250, train=None, random_state=0,
                 snapshot_stride=1):
        self.model = model
        self.kind = kind
        self.n_particles = n_particles
        self.train = train
        self.random_state = random_state
        self.snapshot_stride = snapshot_stride

    def fit(self, observations, truth=None):
        if self.model is None:
            raise ContractViolation("ParticleFilter needs a model")
        cfg = FilterConfig(n_particles=self.n_particles,
                           train=self.train if self.train is not None else TrainConfig(),
                           snapshot_stride=self.snapshot_stride)
        self.run_ = run_filter(self.kind, self.model, observations, cfg, self.random_state, truth=truth)
        self.means_ = self.run_.means
        return self

    def predict(self, observations=None):
        if not hasattr(self, "run_"):
            from sklearn.exceptions import NotFittedError

            raise NotFittedError("call fit first")
        return self.means_
