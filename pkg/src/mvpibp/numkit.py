"""Scalar and matrix numerical primitives shared by the samplers.

Everything here is vectorised over numpy arrays where it makes sense and is
free of hidden state: random draws take an explicit ``numpy.random.Generator``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import special

__all__ = [
    "QuadratureRule",
    "LowRankCorrelation",
    "std_normal_cdf",
    "std_normal_logcdf",
    "std_normal_quantile",
    "bivariate_normal_cdf",
    "sample_truncated_normal",
    "sample_truncated_interval",
    "gauss_legendre",
    "owen_probit_integral",
    "smw_solve",
    "equicorrelation",
]

_TWO_PI = 2.0 * np.pi
# standardized truncation point beyond which inverse-CDF sampling is replaced
# by exponential rejection
_TAIL_SWITCH = 4.0


@dataclass(frozen=True)
class QuadratureRule:
    nodes: np.ndarray
    weights: np.ndarray
    interval: tuple[float, float]

    def integrate(self, f) -> float:
        return float(np.dot(self.weights, f(self.nodes)))


@dataclass(frozen=True)
class LowRankCorrelation:
    """Correlation matrix ``D^-1 (L L^T + I) D^-1`` with ``D_jj = sqrt(1 + |l_j|^2)``."""

    loadings: np.ndarray

    def __post_init__(self):
        lam = np.atleast_2d(np.asarray(self.loadings, dtype=float))
        if not np.all(np.isfinite(lam)):
            raise ValueError("loadings must be finite")
        object.__setattr__(self, "loadings", lam)

    @property
    def p(self) -> int:
        return self.loadings.shape[0]

    @property
    def k(self) -> int:
        return self.loadings.shape[1]

    @property
    def scale(self) -> np.ndarray:
        """Diagonal of ``D``."""
        return np.sqrt(1.0 + np.einsum("jk,jk->j", self.loadings, self.loadings))

    def dense(self) -> np.ndarray:
        lam = self.loadings / self.scale[:, None]
        sigma = lam @ lam.T
        sigma[np.diag_indices_from(sigma)] = 1.0
        return sigma


def std_normal_cdf(x):
    return special.ndtr(x)


def std_normal_logcdf(x):
    return special.log_ndtr(x)


def std_normal_quantile(p):
    p_arr = np.asarray(p, dtype=float)
    if np.any((p_arr <= 0.0) | (p_arr >= 1.0)) or np.any(np.isnan(p_arr)):
        raise ValueError("quantile requires 0 < p < 1")
    out = special.ndtri(p_arr)
    return float(out) if out.ndim == 0 else out


def gauss_legendre(order: int, lo: float = -1.0, hi: float = 1.0) -> QuadratureRule:
    """Gauss-Legendre rule with ``order`` nodes mapped to ``[lo, hi]``."""
    if int(order) != order or order < 1:
        raise ValueError(f"order must be a positive integer, got {order!r}")
    if not lo < hi:
        raise ValueError(f"need lo < hi, got [{lo}, {hi}]")
    x, w = leggauss(int(order))
    half = 0.5 * (hi - lo)
    return QuadratureRule(nodes=half * x + 0.5 * (hi + lo), weights=half * w,
                          interval=(float(lo), float(hi)))


_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _unit_rule(order: int) -> tuple[np.ndarray, np.ndarray]:
    # nodes/weights on [0, 1]
    if order not in _GL_CACHE:
        x, w = leggauss(order)
        _GL_CACHE[order] = (0.5 * (x + 1.0), 0.5 * w)
    return _GL_CACHE[order]


def bivariate_normal_cdf(a, b, rho, order: int = 32):
    """P(X <= a, Y <= b) for a standard bivariate normal with correlation ``rho``.

    Uses the split ``Phi(a) Phi(b) + I(rho) / (2 pi)`` where ``I`` is the
    integral of the bivariate density kernel over the correlation from 0 to
    ``rho``.  The substitution ``z = sin(t)`` removes the endpoint singularity
    so a fixed Gauss-Legendre rule stays accurate up to ``|rho|`` near 1.
    Arguments broadcast; ``b`` may be ``+inf``.
    """
    a, b, rho = (np.asarray(v, dtype=float) for v in (a, b, rho))
    if np.any(np.abs(rho) >= 1.0) or np.any(np.isnan(rho)):
        raise ValueError("bivariate_normal_cdf requires |rho| < 1")
    base = special.ndtr(a) * special.ndtr(b)
    # an infinite bound reduces the problem to one dimension; the kernel is 0
    finite = np.isfinite(a) & np.isfinite(b)
    aa = np.where(finite, a, 0.0)
    bb = np.where(finite, b, 0.0)
    # the trigonometric factors depend on rho only; keep them at rho's shape
    t_max = np.arcsin(rho)
    u, w = _unit_rule(order)
    t = t_max[..., None] * u
    s = np.sin(t)
    inv_c2 = 1.0 / (1.0 - s * s)
    s_c = s * inv_c2
    half_c = 0.5 * inv_c2
    kern = np.exp((aa * bb)[..., None] * s_c - (aa * aa + bb * bb)[..., None] * half_c)
    integral = t_max * (kern @ w)
    out = base + np.where(finite, integral, 0.0) / _TWO_PI
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def owen_probit_integral(mu, tau):
    """Closed form of ``int Phi(tau x + mu) phi(x) dx = Phi(mu / sqrt(1 + tau^2))``."""
    tau = np.asarray(tau, dtype=float)
    if np.any(tau < 0):
        raise ValueError("tau must be nonnegative")
    out = special.ndtr(np.asarray(mu, dtype=float) / np.sqrt(1.0 + tau * tau))
    return float(out) if np.ndim(out) == 0 else out


def _exp_rejection(a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # draws from N(0, 1) restricted to (a, inf), a > 0, via translated
    # exponential proposals with the optimal rate
    out = np.empty_like(a)
    todo = np.arange(a.size)
    lam = 0.5 * (a + np.sqrt(a * a + 4.0))
    while todo.size:
        aa = a[todo]
        ll = lam[todo]
        x = aa + rng.standard_exponential(todo.size) / ll
        accept = rng.random(todo.size) <= np.exp(-0.5 * (x - ll) ** 2)
        out[todo[accept]] = x[accept]
        todo = todo[~accept]
    return out


def _std_upper(a: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Standard normal draws restricted to ``(a, inf)`` elementwise."""
    out = np.empty_like(a)
    tail = a > _TAIL_SWITCH
    body = ~tail
    if np.any(body):
        ab = a[body]
        # -Phi^-1(u Phi(-a)) lands in (a, inf) and is accurate in the upper tail
        v = rng.random(ab.size) * special.ndtr(-ab)
        v = np.maximum(v, np.finfo(float).tiny)
        out[body] = np.maximum(-special.ndtri(v), ab)
    if np.any(tail):
        out[tail] = _exp_rejection(a[tail], rng)
    return out


def sample_truncated_normal(mean, sd, positive, rng: np.random.Generator):
    """Draw ``N(mean, sd^2)`` restricted to ``[0, inf)`` where ``positive`` is true
    and to ``(-inf, 0)`` elsewhere.

    ``positive`` may be a bool, the strings ``"nonnegative"``/``"negative"``, or
    a boolean array broadcasting against ``mean``.
    """
    if isinstance(positive, str):
        if positive not in ("nonnegative", "negative"):
            raise ValueError(f"unknown side {positive!r}")
        positive = positive == "nonnegative"
    mean, sd, positive = np.broadcast_arrays(np.asarray(mean, dtype=float),
                                             np.asarray(sd, dtype=float),
                                             np.asarray(positive, dtype=bool))
    if np.any(sd <= 0):
        raise ValueError("sd must be positive")
    # reflect the negative side onto the positive one: x < 0  <=>  -x > 0
    sign = np.where(positive, 1.0, -1.0)
    m = (sign * mean).ravel()
    s = sd.ravel()
    std = _std_upper(-m / s, rng)
    x = m + s * std
    x = np.where(positive.ravel(), np.maximum(x, 0.0), np.maximum(x, np.nextafter(0.0, 1.0)))
    out = (sign.ravel() * x).reshape(mean.shape)
    return float(out) if out.ndim == 0 else out


def sample_truncated_interval(mean, sd, lo: float, hi: float, rng: np.random.Generator):
    """Inverse-CDF draw of ``N(mean, sd^2)`` restricted to ``(lo, hi)``.

    Works on whichever tail keeps the CDF differences away from 1.
    """
    mean, sd = np.broadcast_arrays(np.asarray(mean, dtype=float), np.asarray(sd, dtype=float))
    if np.any(sd <= 0) or not lo < hi:
        raise ValueError("need sd > 0 and lo < hi")
    a, b = (lo - mean) / sd, (hi - mean) / sd
    # mirror so the interval sits mostly on the lower half: Phi stays small there
    flip = (a + b) > 0
    a2, b2 = np.where(flip, -b, a), np.where(flip, -a, b)
    pa, pb = special.ndtr(a2), special.ndtr(b2)
    u = rng.random(mean.shape)
    x = special.ndtri(pa + u * (pb - pa))
    x = np.clip(np.where(flip, -x, x), a, b)
    out = np.clip(mean + sd * x, np.nextafter(lo, hi), np.nextafter(hi, lo))
    return float(out) if out.ndim == 0 else out


def smw_solve(lr: LowRankCorrelation, v):
    """Solve ``Sigma x = v`` for the low-rank-plus-identity correlation ``lr``.

    ``Sigma^-1 = D (I - L (I + L^T L)^-1 L^T) D``, so only a k x k system is
    factorised. ``v`` may be a vector or a p x m matrix.
    """
    lam = lr.loadings
    d = lr.scale
    v = np.asarray(v, dtype=float)
    dv = d[:, None] * v if v.ndim == 2 else d * v
    inner = np.eye(lr.k) + lam.T @ lam
    chol = np.linalg.cholesky(inner)
    rhs = lam.T @ dv
    y = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    x = dv - lam @ y
    return d[:, None] * x if v.ndim == 2 else d * x


def equicorrelation(p: int, rho: float) -> np.ndarray:
    """Dense ``rho 11^T + (1 - rho) I``."""
    sigma = np.full((p, p), float(rho))
    np.fill_diagonal(sigma, 1.0)
    return sigma
