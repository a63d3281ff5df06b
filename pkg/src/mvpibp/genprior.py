"""Forward simulators for the IBP / probit IBP / MVP-IBP and the closed-form
limit results used to check them.

Two kinds of oracle live here.  ``oracle_*`` functions are the p -> infinity
closed forms exactly as published.  ``finite_*`` functions give the exact
expectation at a finite truncation level, computed by one-dimensional
quadrature; they are what a Monte Carlo check at finite P actually converges
to, and they make the (slow, O(1 / log P)) gap to the limits visible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize, special

from .model import (CommonRho, CovariateDesign, Factor, FeatureMatrix, HierarchicalZ,
                    IbpCalibration, Identity, calibrate)
from .numkit import LowRankCorrelation, std_normal_quantile

__all__ = [
    "PriorDraw",
    "simulate_ibp_sequential",
    "simulate_beta_bernoulli",
    "correlated_noise",
    "simulate_mvpibp",
    "simulate_covariate_mvpibp",
    "features_per_sample",
    "richness",
    "common_count",
    "harmonic",
    "oracle_expected_common",
    "oracle_ibp_expected_common",
    "oracle_pstar_bounds",
    "oracle_variance_bounds",
    "oracle_covariate_features",
    "oracle_covariate_common",
    "limit_covariate_features",
    "limit_variance_bounds",
    "finite_expected_common",
    "finite_expected_pstar",
    "finite_variance_common_rho",
    "finite_covariate_features",
    "finite_covariate_common",
    "moment_alpha",
]

# constants of the expected-richness bounds (taken as given)
PSTAR_A = 0.073
PSTAR_B = 0.02


@dataclass
class PriorDraw:
    matrix: FeatureMatrix
    betas: np.ndarray
    pis: np.ndarray
    latent: np.ndarray | None = None
    # covariate runs: per-feature coefficient rows (p x q) and per-cell probabilities
    coefs: np.ndarray | None = None
    cell_probs: np.ndarray | None = None


def simulate_ibp_sequential(alpha: float, n: int, rng: np.random.Generator) -> FeatureMatrix:
    """Indian buffet sequential scheme: customer i takes old dish j with
    probability m_j / i and Poisson(alpha / i) new dishes."""
    if not alpha > 0 or n < 1:
        raise ValueError("need alpha > 0 and n >= 1")
    rows: list[np.ndarray] = []
    counts = np.zeros(0, dtype=np.int64)
    for i in range(1, n + 1):
        old = rng.random(counts.size) < counts / i
        new = rng.poisson(alpha / i)
        row = np.concatenate([old, np.ones(new, dtype=bool)])
        counts = np.concatenate([counts, np.zeros(new, dtype=np.int64)]) + row
        rows.append(row)
    p = counts.size
    y = np.zeros((n, p), dtype=np.uint8)
    for i, row in enumerate(rows):
        y[i, : row.size] = row
    return FeatureMatrix(y)


def simulate_beta_bernoulli(alpha: float, n: int, P: int, rng: np.random.Generator):
    """Finite beta-Bernoulli approximation: pi_j ~ Beta(alpha/P, 1), y_ij ~ Bern(pi_j).

    Returns ``(FeatureMatrix, pis)``.
    """
    # Beta(a, 1) is U^(1/a); work on the log scale so tiny a does not underflow
    log_pi = np.log(rng.random(P)) * (P / alpha)
    pis = np.exp(log_pi)
    y = (rng.random((n, P)) < pis).astype(np.uint8)
    return FeatureMatrix(y), pis


def correlated_noise(corr, n: int, p: int, rng: np.random.Generator) -> np.ndarray:
    """n x p rows of ``N_p(0, Sigma)`` for a fully specified correlation model.

    ``corr`` is Identity, CommonRho, Factor with fixed ``loadings``, a
    LowRankCorrelation, or a dense p x p correlation matrix.
    """
    if isinstance(corr, Identity):
        return rng.standard_normal((n, p))
    if isinstance(corr, CommonRho):
        if not corr.is_pd(p):
            raise np.linalg.LinAlgError(
                f"equicorrelation rho={corr.rho} not positive definite for p={p}")
        rho = corr.rho
        # (sqrt(1-rho) I + c 11^T) squared equals the equicorrelation matrix
        c = (-np.sqrt(1.0 - rho) + np.sqrt(1.0 - rho + p * rho)) / p
        e = rng.standard_normal((n, p))
        return np.sqrt(1.0 - rho) * e + c * e.sum(axis=1, keepdims=True)
    if isinstance(corr, Factor):
        if corr.loadings is None:
            raise ValueError("factor model needs fixed loadings to simulate")
        corr = LowRankCorrelation(corr.loadings)
    if isinstance(corr, LowRankCorrelation):
        if corr.p != p:
            raise ValueError("loadings rows do not match p")
        eta = rng.standard_normal((n, corr.k))
        return (eta @ corr.loadings.T + rng.standard_normal((n, p))) / corr.scale
    if isinstance(corr, HierarchicalZ):
        raise ValueError("hierarchical correlation prior has no fixed Sigma to simulate from")
    sigma = np.asarray(corr, dtype=float)
    if sigma.shape != (p, p):
        raise ValueError(f"correlation matrix must be {p}x{p}")
    chol = np.linalg.cholesky(sigma)
    return rng.standard_normal((n, p)) @ chol.T


def simulate_mvpibp(cal: IbpCalibration, corr, n: int, rng: np.random.Generator,
                    keep_latent: bool = False, betas: np.ndarray | None = None) -> PriorDraw:
    """Draw intercepts from N(mu_p, tau_p^2) (unless ``betas`` is given) and
    ``n`` rows ``y = 1(beta + eps > 0)`` with ``eps ~ N_p(0, Sigma)``."""
    p = cal.p
    if betas is None:
        betas = cal.mu_p + cal.tau_p * rng.standard_normal(p)
    betas = np.asarray(betas, dtype=float)
    z = betas + correlated_noise(corr, n, p, rng)
    y = (z > 0).astype(np.uint8)
    return PriorDraw(FeatureMatrix(y), betas, special.ndtr(betas), z if keep_latent else None)


def simulate_covariate_mvpibp(cal: IbpCalibration, corr, design: CovariateDesign, n: int,
                              rng: np.random.Generator, keep_latent: bool = False,
                              betas: np.ndarray | None = None,
                              coefs: np.ndarray | None = None) -> PriorDraw:
    """Covariate-dependent draw: ``z_ij = beta_j + x_i^T b_j + eps_ij`` with
    ``b_j ~ N_q(gamma, Psi)`` from the design's fixed ``(gamma, Psi)``."""
    design.check_rows(n)
    p, q = cal.p, design.q
    if betas is None:
        betas = cal.mu_p + cal.tau_p * rng.standard_normal(p)
    if coefs is None:
        psi = np.atleast_2d(design.Psi)
        if np.allclose(psi, 0.0):
            coefs = np.broadcast_to(design.gamma, (p, q)).copy()
        else:
            coefs = design.gamma + rng.standard_normal((p, q)) @ np.linalg.cholesky(psi).T
    lin = betas + design.X @ coefs.T
    z = lin + correlated_noise(corr, n, p, rng)
    y = (z > 0).astype(np.uint8)
    return PriorDraw(FeatureMatrix(y), betas, special.ndtr(betas), z if keep_latent else None,
                     coefs=coefs, cell_probs=special.ndtr(lin))


# summaries ------------------------------------------------------------------

def _entries(Y):
    return Y.entries if isinstance(Y, FeatureMatrix) else np.asarray(Y)


def features_per_sample(Y) -> np.ndarray:
    return _entries(Y).sum(axis=1).astype(np.int64)


def richness(Y) -> int:
    return int(np.count_nonzero(_entries(Y).any(axis=0)))


def common_count(pis, eps: float) -> int:
    if not 0 < eps < 1:
        raise ValueError("eps must be in (0, 1)")
    return int(np.count_nonzero(np.asarray(pis) > eps))


def harmonic(n: int) -> float:
    return float(np.sum(1.0 / np.arange(1, n + 1)))


# published limit results ------------------------------------------------------

def oracle_expected_common(alpha: float, eps: float) -> float:
    return float(alpha * np.exp(-std_normal_quantile(eps) - 0.5))


def oracle_ibp_expected_common(alpha: float, eps: float) -> float:
    """IBP counterpart ``-alpha log eps``."""
    return float(-alpha * np.log(eps))


def oracle_pstar_bounds(alpha: float, n: int) -> tuple[float, float]:
    if n < 1:
        raise ValueError("n must be >= 1")
    h = harmonic(n)
    return alpha * (h - PSTAR_A), alpha * (h - PSTAR_B)


def oracle_variance_bounds(alpha: float, rhos) -> tuple[float, float]:
    """Published bounds on the limiting var(n_i) for correlations in ``rhos``."""
    r = np.atleast_1d(np.asarray(rhos, dtype=float))
    if r.size == 0:
        raise ValueError("need at least one correlation value")
    if np.any(np.abs(r) >= 1):
        raise ValueError("correlations must satisfy |rho| < 1")
    g = np.abs(np.expm1(r))
    return alpha + alpha**2 / 2 * g.min(), alpha + alpha**2 / 2 * g.max()


def limit_variance_bounds(alpha: float, rhos) -> tuple[float, float]:
    """Bounds with the covariance sum taken over ordered pairs (j != j').

    The published bounds count each pair once; the exact finite-P variance
    (``finite_variance_common_rho``) converges to ``alpha + alpha^2 (e^rho - 1)``
    for a common rho, i.e. to these.
    """
    r = np.atleast_1d(np.asarray(rhos, dtype=float))
    g = np.abs(np.expm1(r))
    return alpha + alpha**2 * g.min(), alpha + alpha**2 * g.max()


def _quad_form(x, Psi) -> float:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    return float(x @ np.atleast_2d(Psi) @ x)


def oracle_covariate_features(alpha, x, gamma, Psi) -> float:
    """Published limit ``alpha g_i``, ``g_i = exp{x'gamma + (x'Psi x - 1) / 2}``."""
    xg = float(np.dot(np.atleast_1d(x), np.atleast_1d(gamma)))
    return float(alpha * np.exp(xg + 0.5 * (_quad_form(x, Psi) - 1.0)))


def limit_covariate_features(alpha, x, gamma, Psi) -> float:
    """Limit of E(n_i) implied by the exact finite-P expression,
    ``alpha exp{x'gamma + x'Psi x / 2}``; it reduces to ``alpha`` at x = 0."""
    xg = float(np.dot(np.atleast_1d(x), np.atleast_1d(gamma)))
    return float(alpha * np.exp(xg + 0.5 * _quad_form(x, Psi)))


def oracle_covariate_common(alpha, eps, x, gamma, Psi) -> float:
    xg = float(np.dot(np.atleast_1d(x), np.atleast_1d(gamma)))
    return float(alpha * np.exp(-std_normal_quantile(eps) + 0.5 * (_quad_form(x, Psi) - 1.0) + xg))


# exact finite-P counterparts -------------------------------------------------

def finite_expected_common(cal: IbpCalibration, eps: float) -> float:
    return float(cal.p * special.ndtr((cal.mu_p - std_normal_quantile(eps)) / cal.tau_p))


def finite_expected_pstar(cal: IbpCalibration, n: int) -> float:
    """``P * E[1 - (1 - Phi(beta))^n]`` with beta ~ N(mu_p, tau_p^2), Sigma-free."""

    def f(u):
        pi = special.ndtr(cal.mu_p + cal.tau_p * u)
        return -np.expm1(n * np.log1p(-np.minimum(pi, 1 - 1e-16))) * np.exp(-0.5 * u * u)

    val, _ = integrate.quad(f, -12.0, 12.0, limit=400, epsabs=1e-15, epsrel=1e-12)
    return float(cal.p * val / np.sqrt(2 * np.pi))


def moment_alpha(pstar: int, n: int, P: int, lo: float = 1e-3, hi: float = 1e4) -> float:
    """Alpha whose Sigma-free expected richness at ``n`` samples equals ``pstar``."""
    if pstar <= 0:
        return lo
    if pstar >= P:
        return hi

    def gap(log_a):
        return finite_expected_pstar(calibrate(float(np.exp(log_a)), P), n) - pstar

    a, b = np.log(lo), np.log(hi)
    if gap(a) > 0:
        return lo
    if gap(b) < 0:
        return hi
    return float(np.exp(optimize.brentq(gap, a, b, xtol=1e-6)))


def finite_variance_common_rho(cal: IbpCalibration, rho: float) -> float:
    """Exact var(n_i) at truncation P under a common correlation ``rho``.

    Marginally ``z_ij ~ N(mu_p, 1 + tau_p^2)`` with pairwise correlation
    ``rho / (1 + tau_p^2)``, so the pair term is a bivariate orthant probability.
    """
    P = cal.p
    q = cal.marginal
    s2 = 1.0 + cal.tau_p**2
    m = cal.mu_p / np.sqrt(s2)
    r = rho / s2
    # the covariance written as an integral over the correlation avoids the
    # cancellation in Phi2 - q^2 for rare features
    cov, _ = integrate.quad(lambda z: np.exp(-m * m / (1 + z)) / np.sqrt(1 - z * z),
                            0.0, r, epsabs=0, epsrel=1e-12)
    cov /= 2 * np.pi
    return float(P * q * (1 - q) + P * (P - 1) * cov)


def finite_covariate_features(cal: IbpCalibration, x, gamma, Psi) -> float:
    xg = float(np.dot(np.atleast_1d(x), np.atleast_1d(gamma)))
    s2 = 1.0 + cal.tau_p**2 + _quad_form(x, Psi)
    return float(cal.p * special.ndtr((cal.mu_p + xg) / np.sqrt(s2)))


def finite_covariate_common(cal: IbpCalibration, eps, x, gamma, Psi) -> float:
    xg = float(np.dot(np.atleast_1d(x), np.atleast_1d(gamma)))
    s2 = cal.tau_p**2 + _quad_form(x, Psi)
    return float(cal.p * special.ndtr((cal.mu_p + xg - std_normal_quantile(eps)) / np.sqrt(s2)))

