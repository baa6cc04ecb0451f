"""Experiment orchestration: bimodal static, sequential filtering, rate study."""

import csv
import hashlib
import io
import json
import os
import platform
import re
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from .. import __version__
from .. import rng as streams
from ..cot import TrainingBatch, fit_quadratic_semidual, init_transport_pair, train_maxmin
from ..exceptions import ContractViolation
from ..filters import FilterConfig, enkf_analysis, enkf_gain, resample, run_filter, sir_weights
from ..metrics import DivergenceSpec, mmd, wasserstein
from ..oracle import SquaredModelOracle, gaussian_brenier
from ..ssm import linear_gaussian, lorenz63, lorenz96, observe, sample_initial, simulate_truth, squared_model
from .config import config_hash, dump_config

COLUMNS = ("experiment", "filter", "seed", "step", "metric", "value")
WORKERS_ENV = "OTFILTER_WORKERS"


def build_model(spec, dim=None):
    """Instantiate the :class:`~otfilter.ssm.StateSpaceModel` described by a model block."""
    kw = {}
    if spec.truth_init_mean is not None:
        kw["truth_init_mean"] = spec.truth_init_mean
    if spec.truth_init_var is not None:
        kw["truth_init_cov"] = spec.truth_init_var
    if spec.truth_noise is not None:
        kw["truth_noise"] = spec.truth_noise
    if spec.system == "lorenz63":
        return lorenz63(dt=spec.dt, sigma_proc=spec.sigma_proc, obs_var=spec.obs_var,
                        obs_index=tuple(spec.obs_index), init_mean=spec.init_mean,
                        init_cov=spec.init_var, **kw)
    if spec.system == "lorenz96":
        return lorenz96(n=spec.state_dim, dt=spec.dt, sigma_proc=spec.sigma_proc, obs_var=spec.obs_var,
                        obs_index=tuple(spec.obs_index), init_mean=spec.init_mean,
                        init_cov=spec.init_var, forcing=spec.forcing, **kw)
    if spec.system == "squared":
        return squared_model(dim or spec.state_dim, spec.sigma)
    n = spec.state_dim
    idx = tuple(spec.obs_index) or tuple(range(1, n + 1))
    H = np.eye(n)[[i - 1 for i in idx]]
    model = linear_gaussian(spec.transition * np.eye(n), H, spec.sigma_proc**2 * np.eye(n),
                            spec.obs_var * np.eye(len(idx)), spec.init_mean * np.ones(n),
                            spec.init_var * np.eye(n), truth_noise=kw.get("truth_noise", True))
    return model


# ---------------------------------------------------------------- bimodal static


@dataclass
class StaticResult:
    posterior: np.ndarray
    prior: np.ndarray
    pair: object = None
    batch: TrainingBatch = None


def static_analysis(kind, model, Y, n_particles, train, seed):
    """One analysis step from prior samples: OT map, EnKF update or SIR reweighting."""
    u = sample_initial(model, n_particles, seed)
    y = observe(model, u, streams.normals(seed, 1, "obs", (n_particles, model.obs_dim)))
    perm = streams.stream(seed, 1, "perm").permutation(n_particles)
    batch = TrainingBatch(y, u, u[perm])
    Y = np.atleast_1d(np.asarray(Y, dtype=np.float64))
    if kind == "ot":
        pair = init_transport_pair(model.obs_dim, model.state_dim, "plain", train.hidden, train.seed + seed)
        pair = train_maxmin(train, batch, pair, iterations=train.iterations)
        return StaticResult(pair.apply(Y, u), u, pair, batch)
    if kind == "enkf":
        return StaticResult(enkf_analysis(u, enkf_gain(u, y), Y, y), u, None, batch)
    if kind == "sir":
        w = sir_weights(model, Y, u)
        return StaticResult(u[resample(w, streams.stream(seed, 1, "resample"))], u, None, batch)
    raise ContractViolation(f"unknown static kind {kind!r}")


def monotone_violation(pair, Y, u):
    """Fraction of ordered pairs ``i != j`` with ``<T(Y,u_i) - T(Y,u_j), u_i - u_j> < 0``."""
    T = pair.apply(Y, u)
    du = u[:, None, :] - u[None, :, :]
    dT = T[:, None, :] - T[None, :, :]
    inner = np.sum(du * dT, axis=2)
    N = u.shape[0]
    off = ~np.eye(N, dtype=bool)
    return float(np.mean(inner[off] < 0))


def map_l2_error(pair, oracle, n_eval, seed):
    """``L2(eta)`` distance between the learned map at ``Y`` and the exact map."""
    u = streams.normals(seed, 0, "mc", (n_eval, oracle.dim))
    diff = pair.apply(oracle.y, u) - oracle.map(u)
    return float(np.sqrt(np.mean(np.sum(diff * diff, axis=1))))


def bimodal_cell(cfg, fspec, dim, seed):
    """Metric rows and posterior particles for one (filter, dimension, seed) cell."""
    model = build_model(cfg.model, dim)
    Y = np.full(dim, cfg.model.y_obs)
    res = static_analysis(fspec.kind, model, Y, fspec.n_particles, fspec.train, seed)
    oracle = SquaredModelOracle(Y, cfg.model.sigma)
    exact = oracle.sample(fspec.n_particles, streams.stream(seed, 2, "mc"))
    rows = []
    for kind in cfg.metrics.kinds:
        if kind in ("W1", "W2"):
            cap = max(cfg.metrics.cap, fspec.n_particles)
            val = wasserstein(res.posterior, exact, 1 if kind == "W1" else 2, cap=cap)
        elif kind == "MMD":
            val = mmd(res.posterior, exact, cfg.metrics.bandwidth)
        elif kind == "MSE":
            d = res.posterior.mean(axis=0) - exact.mean(axis=0)
            val = float(d @ d / dim)
        elif kind == "monotone_violation":
            if res.pair is None:
                continue
            val = monotone_violation(res.pair, Y, res.prior)
        elif kind == "map_l2":
            if res.pair is None:
                continue
            val = map_l2_error(res.pair, oracle, 10_000, seed)
        else:
            continue
        rows.append((1, kind, val))
    return rows, res


# ---------------------------------------------------------------- rate study


def rate_instance(dim, obs_dim, seed=12345):
    """Fixed linear-Gaussian conditional task ``u ~ N(0, P)``, ``y = H u + noise``."""
    rng = streams.stream(seed, 0, "mc")
    G = rng.standard_normal((dim, dim))
    P = G @ G.T / dim + 0.5 * np.eye(dim)
    H = rng.standard_normal((obs_dim, dim))
    R = 0.5 * np.eye(obs_dim)
    return P, H, R


def quadratic_map_error(phi, P, H, R):
    """Exact ``L2(eta x nu_Y)`` error of ``grad phi`` against the conditional Brenier map."""
    Cy = H @ P @ H.T + R
    K = P @ H.T @ np.linalg.inv(Cy)
    Pp = P - K @ H @ P
    A, _ = gaussian_brenier(np.zeros(len(P)), P, np.zeros(len(P)), Pp)
    D = phi.Q() - A
    b0 = phi.params.view("b0")
    dB = phi.params.view("B") - K
    err2 = np.trace(D @ P @ D) + b0 @ b0 + np.trace(dB @ Cy @ dB.T)
    return float(np.sqrt(max(err2, 0.0)))


def rate_cell(dim, obs_dim, n, seed):
    P, H, R = rate_instance(dim, obs_dim)
    L, Lr = np.linalg.cholesky(P), np.linalg.cholesky(R)
    u = streams.normals(seed, n, "init", (n, dim)) @ L.T
    y = u @ H.T + streams.normals(seed, n, "obs", (n, obs_dim)) @ Lr.T
    v = streams.normals(seed, n, "mc", (n, dim)) @ L.T
    phi = fit_quadratic_semidual(y, u, v)
    return quadratic_map_error(phi, P, H, R)


def loglog_slope(sizes, errors):
    """Least-squares slope and R^2 of ``log error`` against ``log size``."""
    x, y = np.log(np.asarray(sizes, dtype=float)), np.log(np.asarray(errors, dtype=float))
    slope, icpt = np.polyfit(x, y, 1)
    resid = y - (slope * x + icpt)
    ss = np.sum((y - y.mean()) ** 2)
    return float(slope), float(1 - resid @ resid / ss) if ss > 0 else 1.0


# ---------------------------------------------------------------- filtering


def both_signs(particles, threshold=0.05, component=0):
    """1.0 when both signs of a component each hold at least ``threshold`` of the particles."""
    x = particles[:, component]
    return float(min(np.mean(x > 0), np.mean(x < 0)) >= threshold)


def reference_run(cfg, model, truth, seed):
    if cfg.reference.kind != "sir":
        return None
    fc = FilterConfig(n_particles=cfg.reference.n_particles, snapshot_stride=cfg.snapshot_stride)
    return run_filter("sir", model, truth.observations, fc, seed=seed + 1_000_003)


def _subsample(samples, size, seed, t):
    if samples.shape[0] <= size:
        return samples
    idx = streams.stream(seed, t, "mc").choice(samples.shape[0], size, replace=False)
    return samples[np.sort(idx)]


def filtering_cell(cfg, fspec, seed, truth=None, reference=None):
    """Run one filter on one seed; returns metric rows and the :class:`FilterRun`."""
    model = build_model(cfg.model)
    truth = simulate_truth(model, cfg.steps, seed) if truth is None else truth
    fc = FilterConfig(n_particles=fspec.n_particles, train=fspec.train, snapshot_stride=cfg.snapshot_stride)
    run = run_filter(fspec.kind, model, truth.observations, fc, seed=seed, truth=truth.states)
    rows = []
    kinds = cfg.metrics.kinds
    if "MSE" in kinds:
        rows.extend((t, "MSE", v) for t, name, v in run.metrics if name == "MSE")
    for t in sorted(run.ensembles):
        post = run.ensembles[t]
        if "both_signs" in kinds:
            rows.append((t, "both_signs", both_signs(post, cfg.metrics.sign_threshold)))
        if reference is None or t not in reference.ensembles:
            continue
        ref = _subsample(reference.ensembles[t], min(cfg.reference.subsample, post.shape[0]), seed, t)
        own = _subsample(post, ref.shape[0], seed + 1, t)
        for kind in kinds:
            if kind in ("W1", "W2", "MMD"):
                rows.append((t, kind, DivergenceSpec(kind, cfg.metrics.bandwidth, cfg.metrics.cap)(own, ref)))
    return rows, run


# ---------------------------------------------------------------- result table


@dataclass
class ResultTable:
    """Long-format results with a manifest."""

    rows: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)

    def sort(self):
        self.rows.sort(key=lambda r: (r[1], r[2], r[3], r[0], r[4]))
        return self

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for e, f, s, t, m, v in self.rows:
            w.writerow((e, f, s, t, m, repr(float(v))))
        return buf.getvalue()

    def digest(self):
        return hashlib.sha256(self.to_csv().encode()).hexdigest()

    @classmethod
    def read(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "results.csv"
        rows = []
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if tuple(header or ()) != COLUMNS:
                raise ContractViolation(f"{path} is not a result table (header {header})")
            for e, f, s, t, m, v in reader:
                rows.append((e, f, int(s), int(t), m, float(v)))
        manifest = {}
        mpath = path.parent / "manifest.json"
        if mpath.is_file():
            manifest = json.loads(mpath.read_text())
        return cls(rows, manifest)

    def values(self, metric, filter_name=None, experiment=None):
        return [r for r in self.rows if r[4] == metric and (filter_name is None or r[1] == filter_name)
                and (experiment is None or r[0] == experiment)]

    def by_seed(self, metric, filter_name, lo=None, hi=None, experiment=None):
        """``seed -> mean value`` over steps in ``[lo, hi]``."""
        acc = {}
        for e, f, s, t, m, v in self.values(metric, filter_name, experiment):
            if (lo is None or t >= lo) and (hi is None or t <= hi):
                acc.setdefault(s, []).append(v)
        return {s: float(np.mean(v)) for s, v in sorted(acc.items())}


def bimodal_label(name, dim):
    return f"{name}:n={dim}"


def parse_dim(label):
    m = re.search(r":n=(\d+)$", label)
    return int(m.group(1)) if m else None


def _cells(cfg):
    if cfg.task == "bimodal":
        return [(f.name, s, d) for d in cfg.model.dims for f in cfg.filters for s in cfg.seeds]
    if cfg.task == "rate_study":
        return [(f.name, s, n) for n in cfg.rate.sizes for f in cfg.filters for s in cfg.seeds]
    return [(f.name, s, None) for f in cfg.filters for s in cfg.seeds]


def _write_run_dir(root, name, seed, rows, run=None, extra=None):
    d = Path(root) / "runs" / f"{name}_seed{seed}"
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("step", "metric", "value", "stderr"))
        for t, m, v in rows:
            w.writerow((t, m, repr(float(v)), ""))
    if run is not None:
        with open(d / "ensembles.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            n = next(iter(run.ensembles.values())).shape[1] if run.ensembles else 0
            w.writerow(("step", "particle") + tuple(f"u{k + 1}" for k in range(n)))
            for t in sorted(run.ensembles):
                for i, row in enumerate(run.ensembles[t]):
                    w.writerow((t, i) + tuple(repr(float(x)) for x in row))
        (d / "run.json").write_text(json.dumps({"kind": run.kind, "seed": run.seed, "hash": run.digest(),
                                                "config_hash": run.config_hash}, indent=1))
        if run.pairs:
            last = max(run.pairs)
            np.savetxt(d / "map_T.txt", run.pairs[last].T.params.values)
            np.savetxt(d / "potential_psi.txt", run.pairs[last].psi.params.values)
    if extra is not None:
        for fname, arr in extra.items():
            np.savetxt(d / fname, arr, delimiter=",")


def _run_cell(cfg, name, seed, arg, out):
    fspec = cfg.filter(name)
    tic = time.perf_counter()
    if cfg.task == "bimodal":
        rows, res = bimodal_cell(cfg, fspec, arg, seed)
        exp = bimodal_label(cfg.name, arg)
        if out:
            _write_run_dir(out, f"{name}_n{arg}", seed, rows, extra={"posterior.csv": res.posterior})
    elif cfg.task == "rate_study":
        err = rate_cell(cfg.rate.dim, cfg.rate.obs_dim, arg, seed)
        rows, exp = [(arg, "map_l2", err)], cfg.name
    else:
        model = build_model(cfg.model)
        truth = simulate_truth(model, cfg.steps, seed)
        reference = reference_run(cfg, model, truth, seed)
        rows, run = filtering_cell(cfg, fspec, seed, truth, reference)
        exp = cfg.name
        if out:
            _write_run_dir(out, name, seed, rows, run)
    return [(exp, name, seed, t, m, float(v)) for t, m, v in rows], time.perf_counter() - tic


def _safe_cell(args):
    cfg, name, seed, arg, out = args
    try:
        rows, wall = _run_cell(cfg, name, seed, arg, out)
        return name, seed, arg, rows, wall, None
    except Exception as exc:  # recorded and reported; the remaining cells still run
        return name, seed, arg, [], 0.0, f"{type(exc).__name__}: {exc}\n{traceback.format_exc(limit=3)}"


class OutputConflict(RuntimeError):
    """The output directory holds results of a different configuration."""


def run_experiment(cfg, out=None, force=False, workers=None):
    """Run every (filter, seed) cell and persist the long-format table.

    Failed cells are listed under ``manifest["failures"]``; the remaining
    cells still run. Re-running an identical config reproduces
    ``results.csv`` byte for byte.
    """
    out = out or cfg.out or None
    chash = config_hash(cfg)
    if out:
        out = Path(out)
        mpath = out / "manifest.json"
        if mpath.is_file() and not force:
            old = json.loads(mpath.read_text()).get("config_hash")
            if old != chash:
                raise OutputConflict(f"{out} holds results for config {old}, not {chash}; use --force")
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.cfg").write_text(dump_config(cfg))
    workers = int(os.environ.get(WORKERS_ENV, "1")) if workers is None else int(workers)
    jobs = [(cfg, n, s, a, str(out) if out else None) for n, s, a in _cells(cfg)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_safe_cell, jobs))
    else:
        results = [_safe_cell(j) for j in jobs]
    table = ResultTable()
    wall, failures = [], []
    for name, seed, arg, rows, secs, err in results:
        table.rows.extend(rows)
        wall.append({"filter": name, "seed": seed, "arg": arg, "seconds": round(secs, 3)})
        if err:
            failures.append({"filter": name, "seed": seed, "arg": arg, "error": err})
    table.sort()
    table.manifest = {
        "experiment": cfg.name,
        "task": cfg.task,
        "config_hash": chash,
        "table_hash": table.digest(),
        "versions": {"otfilter": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "wall_clock": wall,
        "failures": failures,
    }
    if out:
        (out / "results.csv").write_text(table.to_csv())
        (out / "manifest.json").write_text(json.dumps(table.manifest, indent=1))
    return table
