"""Central and non-central chi-squared machinery.

The non-central law is evaluated as a Poisson mixture of central
chi-squared laws. Every public function accepts scalars or numpy arrays and
broadcasts like a ufunc; scalars come back as Python floats.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DomainError, UnderflowError

POISSON_TAIL = 1e-14
QUANTILE_LOG_TOL = 1e-13
UNDERFLOW_FLOOR = 1e-300


def _out(x):
    x = np.asarray(x, dtype=float)
    return float(x) if x.ndim == 0 else x


def _check_dof(p):
    if int(p) != p or p < 1:
        raise DomainError(f"degrees of freedom must be a positive integer, got {p}")
    return int(p)


def _check_lambda(lam):
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0) or np.any(np.isnan(lam)):
        raise DomainError("non-centrality must be non-negative")
    return lam


# ---------------------------------------------------------------------------
# central chi-squared


def chi2_cdf(x, p):
    """CDF of the central chi-squared law with ``p`` degrees of freedom."""
    p = _check_dof(p)
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError("chi-squared CDF is defined for x >= 0")
    return _out(special.gammainc(p / 2.0, x / 2.0))


def chi2_quantile(u, p):
    """Inverse of :func:`chi2_cdf`."""
    return nc_chi2_quantile(u, p, 0.0)


# ---------------------------------------------------------------------------
# Poisson mixture


def poisson_window(mu: float, tail: float = POISSON_TAIL) -> tuple[int, int]:
    """Index range [lo, hi] of a Poisson(mu) law holding mass >= 1 - tail.

    Starts at the mode and grows toward whichever neighbour carries more
    weight, so large ``mu`` never touches underflowing terms.
    """
    if mu <= 0:
        return 0, 0
    mode = int(math.floor(mu))
    logmu = math.log(mu)

    def w(j):
        return math.exp(-mu + j * logmu - math.lgamma(j + 1))

    lo = hi = mode
    total = w(mode)
    w_lo = w(lo - 1) if lo > 0 else 0.0
    w_hi = w(hi + 1)
    while total < 1.0 - tail:
        if w_hi >= w_lo:
            hi += 1
            total += w_hi
            w_hi = w(hi + 1)
        else:
            lo -= 1
            total += w_lo
            w_lo = w(lo - 1) if lo > 0 else 0.0
        if w_hi == 0.0 and w_lo == 0.0:
            break
    return lo, hi


def _mixture_terms(lam: np.ndarray):
    """Poisson indices and weights covering every element of ``lam``."""
    mu = lam / 2.0
    lo, _ = poisson_window(float(mu.min()))
    _, hi = poisson_window(float(mu.max()))
    j = np.arange(lo, hi + 1, dtype=float)
    m = mu[..., None]
    with np.errstate(divide="ignore", invalid="ignore"):
        logw = -m + j * np.log(m) - special.gammaln(j + 1)
    logw = np.where(m == 0, np.where(j == 0, 0.0, -np.inf), logw)
    return j, np.exp(logw)


def _central_pdf(x, nu):
    with np.errstate(divide="ignore", invalid="ignore"):
        logf = (nu / 2 - 1) * np.log(x / 2) - x / 2 - special.gammaln(nu / 2) - math.log(2)
        out = np.exp(logf)
    out = np.where(x > 0, out, np.where(nu == 2, 0.5, np.where(nu < 2, np.inf, 0.0)))
    return out


def _nc_cdf_pdf(x, p, lam, want_pdf=False, terms=None):
    x, lam = np.broadcast_arrays(np.asarray(x, float), np.asarray(lam, float))
    shape = x.shape
    x = x.reshape(-1)
    lam = lam.reshape(-1)
    j, w = _mixture_terms(lam) if terms is None else terms
    nu = p + 2 * j
    xc = x[:, None]
    F = special.gammainc(nu / 2, xc / 2)
    cdf = np.sum(w * F, axis=1).reshape(shape)
    if not want_pdf:
        return cdf, None
    pdf = np.sum(w * _central_pdf(xc, nu), axis=1).reshape(shape)
    return cdf, pdf


# ---------------------------------------------------------------------------
# non-central chi-squared


def nc_chi2_cdf(x, p, lam):
    """CDF of the non-central chi-squared law ``chi2_p(lam)``."""
    p = _check_dof(p)
    lam = _check_lambda(lam)
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise DomainError("chi-squared CDF is defined for x >= 0")
    cdf, _ = _nc_cdf_pdf(x, p, lam)
    return _out(np.clip(cdf, 0.0, 1.0))


def nc_chi2_pdf(x, p, lam):
    p = _check_dof(p)
    lam = _check_lambda(lam)
    _, pdf = _nc_cdf_pdf(x, p, lam, want_pdf=True)
    return _out(pdf)


def small_a_cdf_asymptote(p, lam, a):
    """Leading term of the CDF at a small argument ``a``.

    ``a^{p/2} exp(-lam/2) / (2^{p/2} Gamma(p/2 + 1))``.
    """
    p = _check_dof(p)
    lam = _check_lambda(lam)
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0):
        raise DomainError("asymptote requires a > 0")
    log_val = (p / 2) * np.log(a) - lam / 2 - (p / 2) * math.log(2) - special.gammaln(p / 2 + 1)
    return _out(np.exp(log_val))


def nc_chi2_quantile(u, p, lam):
    """Quantile of ``chi2_p(lam)`` at probability ``u``.

    Safeguarded Newton iteration on ``log F(exp(t)) = log u`` inside a
    bracket that is tightened on every evaluation; falls back to bisection
    whenever a Newton step leaves the bracket. With ``lam = 0`` the central
    inverse is used directly. Probabilities below 1e-300 raise
    UnderflowError.
    """
    p = _check_dof(p)
    lam = _check_lambda(lam)
    u = np.asarray(u, dtype=float)
    if np.any(~((u > 0) & (u < 1))):
        raise DomainError("quantile probability must lie in (0, 1)")
    if np.any(u < UNDERFLOW_FLOOR):
        raise UnderflowError("quantile probability below 1e-300")
    if not np.any(lam):
        return _out(np.broadcast_to(2.0 * special.gammaincinv(p / 2.0, u), np.broadcast(u, lam).shape).copy())
    u, lam = np.broadcast_arrays(u, lam)
    shape = u.shape
    u = u.reshape(-1).copy()
    lam = lam.reshape(-1).copy()
    logu = np.log(u)

    # lam is fixed during the solve, so the mixture weights are reused
    j, w = _mixture_terms(lam)
    lo = np.zeros_like(u)
    hi = p + lam + 10.0 * np.sqrt(2.0 * (p + 2.0 * lam)) + 10.0
    for _ in range(200):
        F_hi, _ = _nc_cdf_pdf(hi, p, lam, terms=(j, w))
        short = F_hi < u
        if not short.any():
            break
        lo = np.where(short, hi, lo)
        hi = np.where(short, 2.0 * hi, hi)

    # start from the two-moment (Patnaik) approximation, clipped into the bracket
    scale = (p + 2.0 * lam) / (p + lam)
    dof = (p + lam) ** 2 / (p + 2.0 * lam)
    x = 2.0 * scale * special.gammaincinv(dof / 2.0, u)
    x = np.where(np.isfinite(x) & (x > lo) & (x < hi), x, np.where(lo > 0, np.sqrt(lo * hi), hi / 2))

    prev_h = np.full_like(u, np.inf)
    active = np.ones_like(u, dtype=bool)
    for _ in range(300):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        xa = x[idx]
        F, f = _nc_cdf_pdf(xa, p, lam[idx], want_pdf=True, terms=(j, w[idx]))
        with np.errstate(divide="ignore", invalid="ignore"):
            h = np.log(F) - logu[idx]
        below = h < 0
        lo[idx] = np.where(below, np.maximum(lo[idx], xa), lo[idx])
        hi[idx] = np.where(below, hi[idx], np.minimum(hi[idx], xa))
        done = (np.abs(h) < QUANTILE_LOG_TOL) | (hi[idx] - lo[idx] <= 4e-16 * hi[idx])
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            slope = xa * f / F
            x_new = np.exp(np.log(xa) - h / slope)
        # bisect when Newton leaves the bracket or stalls
        stalled = ~(np.abs(h) < 0.5 * np.abs(prev_h[idx]))
        bad = ~np.isfinite(x_new) | (x_new <= lo[idx]) | (x_new >= hi[idx]) | stalled
        mid = np.where(lo[idx] > 0, np.sqrt(lo[idx] * hi[idx]), hi[idx] / 2)
        x_new = np.where(bad, mid, x_new)
        prev_h[idx] = np.where(bad, np.inf, h)
        x[idx] = np.where(done, xa, x_new)
        active[idx[done]] = False
    return _out(x.reshape(shape))


def nc_chi2_truncated_mean(p, lam, a):
    """``E(M | M < a)`` for ``M ~ chi2_p(lam)``.

    Uses the partial-moment identity for each mixture component:
    the integral of ``y f_nu(y)`` over (0, a) equals ``nu F_{nu+2}(a)``.
    """
    p = _check_dof(p)
    lam = _check_lambda(lam)
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0):
        raise DomainError("truncation point must be positive")
    a, lam = np.broadcast_arrays(a, lam)
    shape = a.shape
    a = a.reshape(-1)
    lam = lam.reshape(-1)
    j, w = _mixture_terms(lam)
    nu = p + 2 * j
    ac = a[:, None]
    F = np.sum(w * special.gammainc(nu / 2, ac / 2), axis=1)
    if np.any(F < UNDERFLOW_FLOOR):
        raise UnderflowError("truncation mass below 1e-300")
    partial = np.sum(w * nu * special.gammainc(nu / 2 + 1, ac / 2), axis=1)
    return _out((partial / F).reshape(shape))


# ---------------------------------------------------------------------------
# typed wrappers


@dataclass(frozen=True)
class NoncentralChi2:
    dof: int
    lam: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "dof", _check_dof(self.dof))
        if not self.lam >= 0:
            raise DomainError("non-centrality must be non-negative")

    def cdf(self, x):
        return nc_chi2_cdf(x, self.dof, self.lam)

    def quantile(self, u):
        return nc_chi2_quantile(u, self.dof, self.lam)

    @property
    def mean(self) -> float:
        return self.dof + self.lam


@dataclass(frozen=True)
class TruncatedNoncentralChi2:
    base: NoncentralChi2
    upper: float

    def __post_init__(self):
        if not self.upper > 0:
            raise DomainError("upper truncation point must be positive")

    @property
    def mass(self) -> float:
        if math.isinf(self.upper):
            return 1.0
        return self.base.cdf(self.upper)

    @property
    def mean(self) -> float:
        if math.isinf(self.upper):
            return self.base.mean
        return nc_chi2_truncated_mean(self.base.dof, self.base.lam, self.upper)


# ---------------------------------------------------------------------------
# samplers


def sample_nc_chi2(p, lam, rng: np.random.Generator, size=None):
    """Draw ``(Z + sqrt(lam))^2 + chi2_{p-1}``."""
    p = _check_dof(p)
    lam = _check_lambda(lam)
    z = rng.standard_normal(size)
    out = (z + np.sqrt(lam)) ** 2
    if p > 1:
        out = out + rng.chisquare(p - 1, size)
    return _out(out)


def truncated_inverse_cdf(v, p, lam, upper):
    """Map uniforms ``v`` to the law truncated to (0, upper) by inversion."""
    v = np.asarray(v, dtype=float)
    upper = np.asarray(upper, dtype=float)
    mass = np.where(np.isinf(upper), 1.0, nc_chi2_cdf(np.where(np.isinf(upper), 0.0, upper), p, lam))
    if np.any(mass < UNDERFLOW_FLOOR):
        raise UnderflowError("truncation mass below 1e-300")
    x = np.asarray(nc_chi2_quantile(np.clip(v * mass, 1e-300, None), p, lam))
    x = np.minimum(x, np.nextafter(upper, 0.0))
    return _out(x)


def sample_truncated(dist: TruncatedNoncentralChi2, rng: np.random.Generator, size=None):
    """Inverse-CDF draw from a truncated non-central chi-squared law."""
    if dist.mass < UNDERFLOW_FLOOR:
        raise UnderflowError("truncation mass below 1e-300")
    v = rng.random(size)
    # a zero uniform maps to the lower support edge; keep it strictly inside
    v = np.where(v == 0.0, np.finfo(float).tiny, v)
    return truncated_inverse_cdf(v, dist.base.dof, dist.base.lam, dist.upper)


# ---------------------------------------------------------------------------
# within-group balance diagnostic


def conditional_second_moment(alpha1, alpha2, c):
    """``E(Y1^2 | (alpha1 Y1 + alpha2 Y2)^2 < c)`` for independent standard normals.

    Closed form ``1 - 2 beta gamma phi(gamma) / (Phi(gamma) - Phi(-gamma))``
    with ``beta = alpha1^2/(alpha1^2 + alpha2^2)`` and
    ``gamma = sqrt(c/(alpha1^2 + alpha2^2))``.
    """
    alpha1, alpha2, c = (np.asarray(v, dtype=float) for v in (alpha1, alpha2, c))
    if np.any(alpha1 <= 0) or np.any(alpha2 <= 0) or np.any(c <= 0):
        raise DomainError("alpha1, alpha2 and c must be positive")
    s2 = alpha1**2 + alpha2**2
    beta = alpha1**2 / s2
    gamma = np.sqrt(c / s2)
    phi = np.exp(-gamma**2 / 2) / math.sqrt(2 * math.pi)
    mass = special.erf(gamma / math.sqrt(2))
    return _out(1.0 - 2.0 * beta * gamma * phi / mass)
