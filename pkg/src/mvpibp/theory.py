"""Monte Carlo checks of the prior's closed-form limit results.

Every check simulates from the prior at a finite truncation level, compares
the estimate with the published limit at the stated tolerance, and also
reports the exact finite-P expectation so that slow pre-asymptotic
convergence is visible next to a failure.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import special

from .genprior import (CommonRho, correlated_noise, finite_covariate_common,
                       finite_covariate_features, finite_expected_common,
                       finite_expected_pstar, finite_variance_common_rho,
                       oracle_covariate_common, oracle_covariate_features,
                       oracle_expected_common, oracle_pstar_bounds, oracle_variance_bounds)
from .model import calibrate
from .numkit import std_normal_quantile

__all__ = ["Check", "check_poisson_rows", "check_variance_bounds", "check_sparsity",
           "check_common_features", "check_pstar_bounds", "check_covariate_features",
           "check_covariate_common", "run_theory_checks", "format_table"]

_BLOCK = 2000_000  # cells simulated per batch


@dataclass
class Check:
    name: str
    estimate: float
    lo: float
    hi: float
    finite_p: float | None = None
    detail: str = ""

    @property
    def passed(self) -> bool:
        return bool(self.lo <= self.estimate <= self.hi)

    def as_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}


def _marginal_row_counts(cal, n: int, rng) -> np.ndarray:
    """``n`` independent draws of n_i from its prior marginal (identity Sigma):
    every row gets fresh intercepts."""
    P = cal.p
    step = max(1, _BLOCK // P)
    out = np.empty(n, dtype=np.int64)
    for s in range(0, n, step):
        k = min(step, n - s)
        z = cal.mu_p + cal.tau_p * rng.standard_normal((k, P)) + rng.standard_normal((k, P))
        out[s:s + k] = (z > 0).sum(axis=1)
    return out


def check_poisson_rows(alpha: float, P: int, n: int, rng) -> list[Check]:
    """n_i approximately Poisson(alpha): mean, variance and dispersion index."""
    cal = calibrate(alpha, P)
    ni = _marginal_row_counts(cal, n, rng).astype(float)
    m, v = ni.mean(), ni.var(ddof=1)
    se_m = np.sqrt(v / n)
    # sampling variance of s^2 under a Poisson law: (mu4 - sigma^4 (n-3)/(n-1)) / n
    mu4 = alpha + 3 * alpha**2
    se_v = np.sqrt((mu4 - alpha**2 * (n - 3) / (n - 1)) / n)
    q = cal.marginal
    return [
        Check("poisson_rows.mean", m, alpha - 3 * se_m, alpha + 3 * se_m, P * q),
        Check("poisson_rows.var", v, alpha - 3 * se_v, alpha + 3 * se_v, P * q * (1 - q)),
        Check("poisson_rows.dispersion", v / m, 0.93, 1.07, 1 - q),
    ]


def check_variance_bounds(alpha: float, rho: float, P: int, n_reps: int, rng) -> Check:
    """var(n_i) under a common correlation against the published limit bounds.

    Each replicate redraws the intercepts, so the estimate targets the
    marginal variance of n_i under the prior.
    """
    cal = calibrate(alpha, P)
    corr = CommonRho(rho)
    ni = np.empty(n_reps)
    step = max(1, _BLOCK // P)
    for s in range(0, n_reps, step):
        k = min(step, n_reps - s)
        beta = cal.mu_p + cal.tau_p * rng.standard_normal((k, P))
        ni[s:s + k] = (beta + correlated_noise(corr, k, P, rng) > 0).sum(axis=1)
    v = ni.var(ddof=1)
    # normal-theory SE of a variance estimate, inflated by the observed kurtosis
    kurt = np.mean((ni - ni.mean()) ** 4) / v**2
    se = v * np.sqrt((kurt - 1) / n_reps)
    lo, hi = oracle_variance_bounds(alpha, [rho])
    return Check("variance_bounds", v, lo - 3 * se, hi + 3 * se,
                 finite_variance_common_rho(cal, rho), f"rho={rho}")


def check_sparsity(alpha: float, P: int, n_cells: int, rng) -> Check:
    """pr(y_ij = 1) = alpha / (alpha + P), intercepts redrawn per row."""
    cal = calibrate(alpha, P)
    rows = max(1, n_cells // P)
    step = max(1, _BLOCK // P)
    hits = 0
    for s in range(0, rows, step):
        k = min(step, rows - s)
        z = cal.mu_p + cal.tau_p * rng.standard_normal((k, P)) + rng.standard_normal((k, P))
        hits += int((z > 0).sum())
    total = rows * P
    p_hat = hits / total
    q = cal.marginal
    se = np.sqrt(q * (1 - q) / total)
    return Check("sparsity", p_hat, q - 3 * se, q + 3 * se, q, f"alpha={alpha}, P={P}")


def check_common_features(alpha: float, eps: float, P: int, n_reps: int, rng,
                          rel_tol: float = 0.10) -> Check:
    """Mean number of features with pi_j > eps against the limiting count."""
    cal = calibrate(alpha, P)
    cut = (std_normal_quantile(eps) - cal.mu_p) / cal.tau_p
    counts = np.array([np.count_nonzero(rng.standard_normal(P) > cut) for _ in range(n_reps)])
    target = oracle_expected_common(alpha, eps)
    return Check(f"common_features.eps={eps}", counts.mean(), (1 - rel_tol) * target,
                 (1 + rel_tol) * target, finite_expected_common(cal, eps))


def check_pstar_bounds(alpha: float, n: int, P: int, n_reps: int, rng) -> Check:
    """Mean richness after ``n`` identity-Sigma rows against the published bounds.

    With independent columns, whether column j is ever occupied in ``n`` rows
    is Bernoulli(1 - (1 - pi_j)^n) given pi_j, which is sampled directly.
    """
    cal = calibrate(alpha, P)
    pstar = np.empty(n_reps)
    for r in range(n_reps):
        pi = special.ndtr(cal.mu_p + cal.tau_p * rng.standard_normal(P))
        seen = -np.expm1(n * np.log1p(-np.minimum(pi, 1 - 1e-16)))
        pstar[r] = np.count_nonzero(rng.random(P) < seen)
    se = pstar.std(ddof=1) / np.sqrt(n_reps)
    lo, hi = oracle_pstar_bounds(alpha, n)
    return Check("pstar_bounds", pstar.mean(), lo - 3 * se, hi + 3 * se,
                 finite_expected_pstar(cal, n), f"n={n}")


def _covariate_linear(alpha, P, x, gamma, psi, rng):
    cal = calibrate(alpha, P)
    beta = cal.mu_p + cal.tau_p * rng.standard_normal(P)
    b = gamma + np.sqrt(psi) * rng.standard_normal(P)
    return cal, beta + x * b


def check_covariate_features(alpha: float, P: int, n_reps: int, rng,
                             x=1.0, gamma=0.3, psi=0.25) -> Check:
    """E(n_i) for a sample with a single covariate value ``x``."""
    ni = np.empty(n_reps)
    for r in range(n_reps):
        cal, lin = _covariate_linear(alpha, P, x, gamma, psi, rng)
        ni[r] = np.count_nonzero(lin + rng.standard_normal(P) > 0)
    se = ni.std(ddof=1) / np.sqrt(n_reps)
    target = oracle_covariate_features(alpha, x, gamma, psi)
    return Check("covariate_features", ni.mean(), target - 3 * se, target + 3 * se,
                 finite_covariate_features(cal, x, gamma, psi), f"x={x}, gamma={gamma}, Psi={psi}")


def check_covariate_common(alpha: float, eps: float, P: int, n_reps: int, rng,
                           x=1.0, gamma=0.3, psi=0.25, rel_tol: float = 0.10) -> Check:
    """Count of features with Phi(beta_j + x b_j) > eps for one sample."""
    c = np.empty(n_reps)
    q = std_normal_quantile(eps)
    for r in range(n_reps):
        cal, lin = _covariate_linear(alpha, P, x, gamma, psi, rng)
        c[r] = np.count_nonzero(lin > q)
    target = oracle_covariate_common(alpha, eps, x, gamma, psi)
    return Check(f"covariate_common.eps={eps}", c.mean(), (1 - rel_tol) * target,
                 (1 + rel_tol) * target, finite_covariate_common(cal, eps, x, gamma, psi))


def run_theory_checks(alpha: float = 5.0, P: int = 20000, reps: int = 1000,
                      seed: int = 0) -> list[Check]:
    """The limit-theorem suite at one (alpha, P); ``reps`` scales every sample size.

    Streams for the individual checks are spawned from ``seed`` so adding or
    reordering checks does not change the others.
    """
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(6)]
    checks = check_poisson_rows(alpha, P, 10 * reps, streams[0])
    checks.append(check_variance_bounds(alpha, 0.5, min(P, 5000), 4 * reps, streams[1]))
    checks.append(check_sparsity(alpha, P, 100 * reps, streams[2]))
    checks += [check_common_features(alpha, e, P, reps, streams[3]) for e in (0.1, 0.3, 0.5)]
    checks.append(check_pstar_bounds(alpha, 50, P, reps, streams[4]))
    checks.append(check_covariate_features(alpha, min(P, 10000), reps, streams[5]))
    return checks


def format_table(checks: list[Check]) -> str:
    head = f"{'check':<28} {'estimate':>10} {'lo':>10} {'hi':>10} {'finite-P':>10}  result"
    lines = [head, "-" * len(head)]
    for c in checks:
        fp = "" if c.finite_p is None else f"{c.finite_p:10.4f}"
        lines.append(f"{c.name:<28} {c.estimate:10.4f} {c.lo:10.4f} {c.hi:10.4f} {fp:>10}  "
                     f"{'PASS' if c.passed else 'FAIL'}")
    return "\n".join(lines)
