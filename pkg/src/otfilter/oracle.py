"""Analytic ground truths used to check learned maps and theory bounds."""

from dataclasses import dataclass, field, replace

import numpy as np

from .cot import QuadraticPotential, TrainingBatch, semidual_terms
from .exceptions import ContractViolation, ExtrapolationError, InvalidRegimeError

GRID_POINTS = 4096
PLATEAU_TOL = 1e-12


class Density1D:
    """Tabulated 1-d density from a (possibly unnormalized) log-density.

    The density is integrated with the trapezoid rule on a uniform grid; CDF
    values between nodes are linearly interpolated. The quantile is the
    generalized inverse of that CDF, except on plateaus (runs of nodes whose
    CDF differs from the level by at most ``PLATEAU_TOL``), where the
    midpoint of the plateau is returned. This keeps the median of a
    symmetric density with a near-zero gap exactly at the center.
    """

    def __init__(self, log_density, lo, hi, points=GRID_POINTS):
        if not hi > lo or points < 3:
            raise ContractViolation("grid needs hi > lo and at least 3 points")
        self.log_density = log_density
        self.x = np.linspace(lo, hi, int(points))
        logp = np.asarray(log_density(self.x), dtype=np.float64)
        if logp.shape != self.x.shape or np.any(np.isnan(logp)):
            raise ContractViolation("log-density must return one finite-or--inf value per node")
        p = np.exp(logp - np.max(logp))
        dx = self.x[1] - self.x[0]
        steps = 0.5 * (p[1:] + p[:-1]) * dx
        total = steps.sum()
        self.log_normalizer = float(np.max(logp) + np.log(total))
        self.pdf = p / total
        cdf = np.concatenate([[0.0], np.cumsum(steps) / total])
        cdf[-1] = 1.0
        self.cdf_table = np.clip(np.maximum.accumulate(cdf), 0.0, 1.0)

    @classmethod
    def gaussian(cls, mean=0.0, var=1.0, width=8.0, points=GRID_POINTS):
        sd = np.sqrt(var)
        return cls(lambda x: -0.5 * (x - mean) ** 2 / var, mean - width * sd, mean + width * sd, points)

    @property
    def bounds(self):
        return float(self.x[0]), float(self.x[-1])

    def _check(self, u):
        u = np.asarray(u, dtype=np.float64)
        lo, hi = self.bounds
        if np.any(u < lo) or np.any(u > hi):
            raise ExtrapolationError(f"point outside the quadrature range [{lo}, {hi}]")
        return u

    def density(self, u):
        return np.interp(self._check(u), self.x, self.pdf)

    def cdf(self, u):
        return np.interp(self._check(u), self.x, self.cdf_table)

    def quantile(self, p):
        p = np.asarray(p, dtype=np.float64)
        if np.any(p < 0) or np.any(p > 1):
            raise ContractViolation("probability levels must lie in [0, 1]")
        flat = np.atleast_1d(p).ravel()
        c, x = self.cdf_table, self.x
        lo = np.searchsorted(c, flat - PLATEAU_TOL, side="left")
        hi = np.searchsorted(c, flat + PLATEAU_TOL, side="right") - 1
        k = np.clip(np.searchsorted(c, flat, side="left"), 1, len(x) - 1)
        span = c[k] - c[k - 1]
        frac = np.where(span > 0, (flat - c[k - 1]) / np.where(span > 0, span, 1.0), 0.0)
        out = x[k - 1] + np.clip(frac, 0.0, 1.0) * (x[k] - x[k - 1])
        plateau = hi > lo
        out[plateau] = 0.5 * (x[np.clip(lo[plateau], 0, len(x) - 1)] + x[np.clip(hi[plateau], 0, len(x) - 1)])
        return out.reshape(p.shape) if p.ndim else float(out[0])

    def sample(self, n, rng):
        return self.quantile(rng.random(n))


def cdf_map_1d(prior, posterior, u):
    """Monotone map ``F_post^{-1}(F_prior(u))`` pushing ``prior`` to ``posterior``."""
    return posterior.quantile(prior.cdf(u))


def inverse_map_1d(prior, posterior, x):
    return prior.quantile(posterior.cdf(x))


def potential_1d(prior, posterior, u):
    """``psi(u) = int_{left edge}^{u} (x - T^{-1}(x)) dx`` on the posterior grid."""
    u = posterior._check(u)
    x = posterior.x
    lo, hi = prior.bounds
    tinv = inverse_map_1d(prior, posterior, x)
    integrand = x - np.clip(tinv, lo, hi)
    dx = x[1] - x[0]
    table = np.concatenate([[0.0], np.cumsum(0.5 * (integrand[1:] + integrand[:-1]) * dx)])
    return np.interp(u, x, table)


def posterior_squared_model(y, sigma, prior_var=1.0, width=6.0, points=GRID_POINTS):
    """Posterior of ``U ~ N(0, prior_var)`` given ``Y = U^2 / 2 + sigma W``."""
    if not sigma > 0:
        raise ContractViolation("sigma must be > 0")
    y = float(y)

    def logp(u):
        return -0.5 * u * u / prior_var - (y - 0.5 * u * u) ** 2 / (2 * sigma * sigma)

    return Density1D(logp, -width, width, points)


class SquaredModelOracle:
    """Exact posterior and conditional Brenier map of the squared-observation model.

    Coordinates are independent, so the posterior factorizes and the
    coordinate-wise monotone map is the Brenier map of the product measure.
    """

    def __init__(self, y, sigma, prior_var=1.0):
        self.y = np.atleast_1d(np.asarray(y, dtype=np.float64))
        self.sigma = float(sigma)
        self.prior = Density1D.gaussian(0.0, prior_var, width=8.0)
        self.posteriors = [posterior_squared_model(yk, sigma, prior_var) for yk in self.y]

    @property
    def dim(self):
        return self.y.size

    def sample(self, n, rng):
        return np.column_stack([d.sample(n, rng) for d in self.posteriors])

    def map(self, u):
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        if u.shape[1] != self.dim:
            raise ContractViolation("state dimension does not match the observation")
        lo, hi = self.prior.bounds
        u = np.clip(u, lo, hi)
        return np.column_stack([cdf_map_1d(self.prior, d, u[:, k]) for k, d in enumerate(self.posteriors)])


def _sqrtm(P):
    w, V = np.linalg.eigh(P)
    return (V * np.sqrt(w)) @ V.T, (V / np.sqrt(w)) @ V.T


def _check_spd(P, name):
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    if P.shape[0] != P.shape[1] or not np.allclose(P, P.T, atol=1e-12 * max(1.0, np.abs(P).max())):
        raise ContractViolation(f"{name} must be symmetric")
    if np.linalg.eigvalsh(P).min() <= 0:
        raise ContractViolation(f"{name} must be positive definite")
    return 0.5 * (P + P.T)


def gaussian_brenier(m0, P0, m1, P1):
    """Affine Brenier map ``u -> A u + c`` from ``N(m0, P0)`` to ``N(m1, P1)``."""
    P0, P1 = _check_spd(P0, "P0"), _check_spd(P1, "P1")
    m0 = np.atleast_1d(np.asarray(m0, dtype=np.float64))
    m1 = np.atleast_1d(np.asarray(m1, dtype=np.float64))
    if not (P0.shape == P1.shape and m0.shape == m1.shape == P0.shape[:1]):
        raise ContractViolation("means and covariances must share the dimension")
    R, Rinv = _sqrtm(P0)
    mid, _ = _sqrtm(R @ P1 @ R)
    A = Rinv @ mid @ Rinv
    A = 0.5 * (A + A.T)
    return A, m1 - A @ m0


@dataclass
class HessianBounds:
    """Curvature bounds of the dynamics kernel, likelihood and quadratic class."""

    a_u: tuple
    a_up: tuple
    a_uup: tuple
    theta: tuple
    Q: tuple
    gamma0: float
    Gamma0: float
    gamma: np.ndarray = field(default=None, repr=False)
    Gamma: np.ndarray = field(default=None, repr=False)
    gamma_star: float = None
    Gamma_star: float = None

    def __post_init__(self):
        for name in ("a_u", "a_up", "theta", "Q"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ContractViolation(f"{name} bounds must satisfy 0 < min <= max")
        lo, hi = self.a_uup
        if not 0 <= lo <= hi:
            raise ContractViolation("a_uup bounds must satisfy 0 <= min <= max")
        if not 0 < self.gamma0 <= self.Gamma0:
            raise ContractViolation("initial bounds must satisfy 0 < gamma0 <= Gamma0")

    def m(self, x):
        den = self.a_up[0] + x
        if den <= 0:
            raise InvalidRegimeError(f"m: nonpositive denominator {den}")
        return self.a_u[0] - self.a_uup[1] ** 2 / den

    def M(self, x):
        den = self.a_up[1] + x
        if den <= 0:
            raise InvalidRegimeError(f"M: nonpositive denominator {den}")
        return self.a_u[1] - self.a_uup[0] ** 2 / den

    def conditions(self):
        """The three fixed-point conditions, in order."""
        return (
            self.a_uup[1] ** 2 < self.a_u[0] * self.a_up[0],
            self.a_uup[1] ** 2 < self.a_up[0] ** 2 * self.Q[1] ** 2,
            self.a_uup[0] ** 2 < self.a_up[1] ** 2 * self.Q[0] ** 2,
        )

    def posterior_bounds(self):
        """Bounds ``(theta_min + gamma_t, theta_max + Gamma_t)`` of the joint potential."""
        if self.gamma is None:
            raise ContractViolation("run hessian_recursion first")
        return self.theta[0] + self.gamma, self.theta[1] + self.Gamma


def _fixed_point(A, B, c, s):
    # positive root of g^2 + (sB - A) g - s(AB - c^2) = 0, i.e. g = A - c^2 / (B + g/s)
    disc = (s * B - A) ** 2 + 4 * s * (A * B - c * c)
    if disc < 0:
        return None
    g = 0.5 * ((A - s * B) + np.sqrt(disc))
    return float(g) if g > 0 else None


def rescaled_fixed_points(b):
    """Fixed points ``x*`` of ``s x = m(x)`` (the scaled variable ``x = gamma / s``)."""
    out = []
    for A, B, c, s in ((b.a_u[0], b.a_up[0], b.a_uup[1], b.Q[1] ** 2),
                       (b.a_u[1], b.a_up[1], b.a_uup[0], b.Q[0] ** 2)):
        g = _fixed_point(A, B, c, s)
        out.append(None if g is None else g / s)
    return tuple(out)


def hessian_recursion(b, t_max):
    """Iterate ``gamma_t = m(gamma_{t-1}/smax(Q)^2)`` and ``Gamma_t = M(Gamma_{t-1}/smin(Q)^2)``.

    Returns a copy of ``b`` with the sequences (index 0 holds the initial
    values) and, when all fixed-point conditions hold, the fixed points
    ``gamma*``, ``Gamma*`` of the two iterations.
    """
    if t_max < 0:
        raise ContractViolation("t_max must be >= 0")
    s_max, s_min = b.Q[1] ** 2, b.Q[0] ** 2
    gamma = np.empty(t_max + 1)
    Gamma = np.empty(t_max + 1)
    gamma[0], Gamma[0] = b.gamma0, b.Gamma0
    for t in range(1, t_max + 1):
        gamma[t] = b.m(gamma[t - 1] / s_max)
        Gamma[t] = b.M(Gamma[t - 1] / s_min)
        if gamma[t] <= 0:
            raise InvalidRegimeError(f"lower bound became nonpositive at t={t} ({gamma[t]:.3g})")
    g_star = G_star = None
    if all(b.conditions()):
        g_star = _fixed_point(b.a_u[0], b.a_up[0], b.a_uup[1], s_max)
        G_star = _fixed_point(b.a_u[1], b.a_up[1], b.a_uup[0], s_min)
    return replace(b, gamma=gamma, Gamma=Gamma, gamma_star=g_star, Gamma_star=G_star)


def kalman_precision(a, q, p0, t_max, s=1.0):
    """Scalar predicted-precision recursion ``p_t = p~ / (a^2 + q p~)``, ``p~ = p_{t-1}/s``."""
    p = np.empty(t_max + 1)
    p[0] = p0
    for t in range(1, t_max + 1):
        pt = p[t - 1] / s
        p[t] = pt / (a * a + q * pt)
    return p


def scalar_gaussian_bounds(a, q, gamma0, Gamma0=None, Q=(1.0, 1.0), theta=(1.0, 1.0)):
    """Bounds for the kernel ``(u - a u')^2 / (2q)``."""
    a_u = 1.0 / q
    a_up = a * a / q
    c = abs(a) / q
    return HessianBounds((a_u, a_u), (a_up, a_up), (c, c), theta, Q, gamma0,
                         gamma0 if Gamma0 is None else Gamma0)


@dataclass
class StabilityResult:
    gap: float
    gap_se: float
    lower: float
    lower_se: float
    upper: float
    upper_se: float
    exact_gap: float
    exact_norm: float
    alpha: float
    beta: float

    def holds(self, k=3.0):
        tol_lo = k * np.hypot(self.gap_se, self.lower_se)
        tol_hi = k * np.hypot(self.gap_se, self.upper_se)
        return self.lower <= self.gap + tol_lo and self.gap <= self.upper + tol_hi


def _semidual_exact(Q, b, m0, P0, m1, P1):
    Qinv = np.linalg.inv(Q)
    r = m1 - b
    return 0.5 * (np.trace(Q @ P0) + m0 @ Q @ m0) + b @ m0 + 0.5 * (np.trace(Qinv @ P1) + r @ Qinv @ r)


def stability_gap(phi, m0, P0, m1, P1, n_mc=100_000, rng=None):
    """Monte-Carlo map-stability sandwich for a constant quadratic potential.

    ``phi`` is a :class:`QuadraticPotential` with ``obs_dim`` 0 or a pair
    ``(Q, b)``; the reference is ``N(m0, P0)`` and the target ``N(m1, P1)``.
    The excess semidual ``S(phi) - S(phi_dagger)`` and the squared map error
    are estimated with common random numbers; the closed forms are returned
    alongside.
    """
    if isinstance(phi, QuadraticPotential):
        Q, b = phi.Q(), phi.b()
    else:
        Q, b = phi
        Q = np.atleast_2d(np.asarray(Q, dtype=np.float64))
        b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    Q = _check_spd(Q, "Q")
    m0 = np.atleast_1d(np.asarray(m0, dtype=np.float64))
    m1 = np.atleast_1d(np.asarray(m1, dtype=np.float64))
    A, c = gaussian_brenier(m0, P0, m1, P1)
    n = Q.shape[0]
    if A.shape[0] != n:
        raise ContractViolation("potential and instance dimensions differ")
    rng = np.random.default_rng(0) if rng is None else rng
    v = m0 + rng.standard_normal((n_mc, n)) @ np.linalg.cholesky(P0).T
    u = m1 + rng.standard_normal((n_mc, n)) @ np.linalg.cholesky(P1).T
    y = np.zeros((n_mc, 0))
    phi_q = QuadraticPotential(0, n, Q0=Q, b0=b)
    phi_d = QuadraticPotential(0, n, Q0=A, b0=c)
    batch = TrainingBatch(y, u, v)
    diff = semidual_terms(phi_q, batch) - semidual_terms(phi_d, batch)
    err = np.sum((v @ (Q - A).T + (b - c)) ** 2, axis=1)
    w = np.linalg.eigvalsh(Q)
    alpha, beta = float(w.min()), float(w.max())
    se = lambda z: float(z.std(ddof=1) / np.sqrt(z.size))
    D = Q - A
    shift = D @ m0 + b - c
    exact_norm = float(np.trace(D @ P0 @ D) + shift @ shift)
    exact_gap = float(_semidual_exact(Q, b, m0, P0, m1, P1) - _semidual_exact(A, c, m0, P0, m1, P1))
    return StabilityResult(float(diff.mean()), se(diff), float(err.mean()) / (2 * beta),
                           se(err) / (2 * beta), float(err.mean()) / (2 * alpha), se(err) / (2 * alpha),
                           exact_gap, exact_norm, alpha, beta)


@dataclass
class CaffarelliResult:
    passed: bool
    eigenvalues: np.ndarray
    lower: float
    upper: float
    margin_low: float
    margin_high: float


def caffarelli_check(m0, P0, m1, P1, rtol=1e-10):
    """Check ``sqrt(aF/bG) <= eig(A) <= sqrt(bF/aG)`` for the Gaussian Brenier map.

    ``F`` and ``G`` are the negative log-densities of the reference and target,
    so their curvature bounds are the extreme eigenvalues of the precisions.
    """
    A, _ = gaussian_brenier(m0, P0, m1, P1)
    eF = 1.0 / np.linalg.eigvalsh(_check_spd(P0, "P0"))
    eG = 1.0 / np.linalg.eigvalsh(_check_spd(P1, "P1"))
    lower = np.sqrt(eF.min() / eG.max())
    upper = np.sqrt(eF.max() / eG.min())
    eig = np.linalg.eigvalsh(A)
    lo_m = float(eig.min() - lower)
    hi_m = float(upper - eig.max())
    ok = lo_m >= -rtol * lower and hi_m >= -rtol * upper
    return CaffarelliResult(bool(ok), eig, float(lower), float(upper), lo_m, hi_m)
