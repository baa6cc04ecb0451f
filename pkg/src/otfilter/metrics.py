"""Divergences between sample sets and error summaries for filter runs."""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist, pdist
from scipy.special import logsumexp

from ._validation import check_samples
from .exceptions import ContractViolation

ASSIGNMENT_CAP = 512
KINDS = ("W1", "W2", "MMD", "MSE")


@dataclass(frozen=True)
class DivergenceSpec:
    """Which divergence to compute; ``bandwidth=None`` uses the median heuristic."""

    kind: str = "W2"
    bandwidth: float = None
    cap: int = ASSIGNMENT_CAP
    sinkhorn: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractViolation(f"unknown divergence {self.kind!r}")
        if self.bandwidth is not None and not self.bandwidth > 0:
            raise ContractViolation("MMD bandwidth must be > 0")
        if self.cap < 1:
            raise ContractViolation("assignment cap must be >= 1")

    def __call__(self, a, b):
        if self.kind == "MMD":
            return mmd(a, b, self.bandwidth)
        if self.kind == "MSE":
            a, b = check_samples(a), check_samples(b)
            d = a.mean(axis=0) - b.mean(axis=0)
            return float(d @ d / a.shape[1])
        p = 1 if self.kind == "W1" else 2
        return wasserstein(a, b, p, cap=self.cap, sinkhorn=self.sinkhorn)


def _check_p(p):
    if p not in (1, 2):
        raise ContractViolation("p must be 1 or 2")


def wasserstein_1d(a, b, p=2):
    """Exact 1-d ``W_p`` between empirical measures.

    Unequal sample counts are handled by evaluating both quantile functions
    on the merged grid of their breakpoints.
    """
    _check_p(p)
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ContractViolation("wasserstein_1d needs nonempty samples")
    if a.size == b.size:
        return float(np.mean(np.abs(a - b) ** p) ** (1.0 / p))
    grid = np.union1d(np.arange(1, a.size + 1) / a.size, np.arange(1, b.size + 1) / b.size)
    grid[-1] = 1.0
    mass = np.diff(np.concatenate([[0.0], grid]))
    mid = grid - mass / 2
    qa = a[np.minimum((mid * a.size).astype(int), a.size - 1)]
    qb = b[np.minimum((mid * b.size).astype(int), b.size - 1)]
    return float(np.sum(mass * np.abs(qa - qb) ** p) ** (1.0 / p))


def _sinkhorn(C, eps, iters=2000, tol=1e-10):
    n, m = C.shape
    loga, logb = -np.log(n) * np.ones(n), -np.log(m) * np.ones(m)
    f, g = np.zeros(n), np.zeros(m)
    for _ in range(iters):
        f_old = f
        f = -eps * logsumexp((g[None, :] - C) / eps + logb[None, :], axis=1)
        g = -eps * logsumexp((f[:, None] - C) / eps + loga[:, None], axis=0)
        if np.max(np.abs(f - f_old)) < tol:
            break
    P = np.exp((f[:, None] + g[None, :] - C) / eps + loga[:, None] + logb[None, :])
    return float(np.sum(P * C))


def wasserstein_exact(a, b, p=2, cap=ASSIGNMENT_CAP):
    """Exact ``W_p`` between two equal-size point clouds by optimal assignment."""
    _check_p(p)
    a, b = check_samples(a, "a"), check_samples(b, "b")
    if a.shape != b.shape:
        raise ContractViolation("wasserstein_exact needs equal counts and dimensions")
    if a.shape[0] > cap:
        raise ContractViolation(
            f"N={a.shape[0]} exceeds the assignment cap {cap}; subsample both sets or raise cap")
    C = cdist(a, b) ** p
    rows, cols = linear_sum_assignment(C)
    return float(C[rows, cols].mean() ** (1.0 / p))


def wasserstein(a, b, p=2, cap=ASSIGNMENT_CAP, sinkhorn=False, eps=None):
    """``W_p`` dispatcher: exact 1-d, exact assignment, or Sinkhorn above the cap."""
    a, b = check_samples(a, "a"), check_samples(b, "b")
    if a.shape[1] == 1:
        return wasserstein_1d(a, b, p)
    if sinkhorn and a.shape[0] > cap:
        C = cdist(a, b) ** p
        eps = 0.01 * np.median(C) if eps is None else eps
        return _sinkhorn(C, eps) ** (1.0 / p)
    return wasserstein_exact(a, b, p, cap)


def median_bandwidth(a, b):
    """Median pairwise distance of the pooled samples."""
    pooled = np.vstack([check_samples(a), check_samples(b)])
    if pooled.shape[0] < 2:
        return 1.0
    med = np.median(pdist(pooled))
    return float(med) if med > 0 else 1.0


def mmd(a, b, bandwidth=None):
    """Biased (V-statistic) MMD with kernel ``exp(-|x - x'|^2 / (2 bw^2))``."""
    a, b = check_samples(a, "a"), check_samples(b, "b")
    if a.shape[1] != b.shape[1]:
        raise ContractViolation("sample dimensions differ")
    bw = median_bandwidth(a, b) if bandwidth is None else float(bandwidth)
    if not bw > 0:
        raise ContractViolation("MMD bandwidth must be > 0")

    def k(x, z):
        return np.exp(-cdist(x, z, "sqeuclidean") / (2 * bw * bw)).mean()

    return float(np.sqrt(max(k(a, a) + k(b, b) - 2 * k(a, b), 0.0)))


def mse(estimate, truth):
    """Per-step ``|mean_t - U_t|^2 / n`` and its time average."""
    estimate = check_samples(estimate, "estimate")
    truth = check_samples(truth, "truth")
    if estimate.shape != truth.shape:
        raise ContractViolation(f"trajectory shapes differ: {estimate.shape} vs {truth.shape}")
    series = np.sum((estimate - truth) ** 2, axis=1) / estimate.shape[1]
    return series, float(series.mean())


def mean_filtering_error(runs, reference, spec=None):
    """Per-step divergence to the reference posterior, averaged over runs.

    ``reference`` maps step ``t`` to reference samples (or is a sequence
    indexed from step 1). Returns ``(steps, mean, stderr)``; the standard
    error is zero for a single run.
    """
    spec = DivergenceSpec() if spec is None else spec
    runs = list(runs)
    if not runs:
        raise ContractViolation("at least one run is required")
    if not isinstance(reference, dict):
        reference = {t + 1: r for t, r in enumerate(reference)}
    steps = sorted(set(reference).intersection(runs[0].ensembles))
    for run in runs[1:]:
        if sorted(set(reference).intersection(run.ensembles)) != steps:
            raise ContractViolation("runs do not share the same evaluation steps")
    if not steps:
        raise ContractViolation("no step has both a stored ensemble and reference samples")
    values = np.array([[spec(run.ensembles[t], reference[t]) for t in steps] for run in runs])
    mean = values.mean(axis=0)
    se = values.std(axis=0, ddof=1) / np.sqrt(len(runs)) if len(runs) > 1 else np.zeros(len(steps))
    return np.array(steps), mean, se
