"""Species-richness functionals and new-species prediction."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["RichnessForecast", "expected_richness", "predict_delta", "accumulation_curve"]

QUANTILES = (0.025, 0.5, 0.975)


@dataclass
class RichnessForecast:
    n0: int
    m: int
    delta_draws: np.ndarray
    observed_pstar: int
    # model-based E[p*_{n0}] per draw, kept for diagnostics
    expected_pstar_n0: np.ndarray
    quantiles: dict

    @property
    def mean(self) -> float:
        return float(self.delta_draws.mean())


def expected_richness(pis, n):
    """``sum_j 1 - (1 - pi_j)^n``.  ``pis`` may be a vector or a B x P matrix of
    draws (result per row); ``n`` may be a scalar or an array of sample sizes."""
    pis = np.asarray(pis, dtype=float)
    if np.any((pis < 0) | (pis > 1)):
        raise ValueError("occurrence probabilities must lie in [0, 1]")
    n_arr = np.asarray(n, dtype=float)
    with np.errstate(divide="ignore"):
        log_miss = np.log1p(-pis)
    # pi = 1 gives log_miss = -inf and a found probability of exactly 1
    found = -np.expm1(np.multiply.outer(n_arr, log_miss)) if n_arr.ndim else -np.expm1(n_arr * log_miss)
    found = np.where(np.isnan(found), 1.0, found)
    return found.sum(axis=-1)


def predict_delta(pi_draws, n0: int, m: int, observed_pstar_n0: int) -> RichnessForecast:
    """Posterior draws of the number of new features in ``m`` further samples,
    anchored at the observed richness of the first ``n0`` samples."""
    if n0 < 1 or m < 1:
        raise ValueError("need n0 >= 1 and m >= 1")
    pi_draws = np.atleast_2d(np.asarray(pi_draws, dtype=float))
    ahead = expected_richness(pi_draws, n0 + m)
    delta = ahead - observed_pstar_n0
    qs = dict(zip(QUANTILES, np.quantile(delta, QUANTILES)))
    return RichnessForecast(n0=n0, m=m, delta_draws=delta, observed_pstar=int(observed_pstar_n0),
                            expected_pstar_n0=expected_richness(pi_draws, n0), quantiles=qs)


def accumulation_curve(pi_draws, n_grid, level: float = 0.95) -> dict:
    """Pointwise posterior mean and equal-tailed band of expected richness."""
    grid = np.asarray(n_grid)
    if grid.size == 0 or np.any(np.diff(grid) <= 0):
        raise ValueError("n_grid must be a nonempty increasing sequence")
    pi_draws = np.atleast_2d(np.asarray(pi_draws, dtype=float))
    curves = expected_richness(pi_draws, grid)  # len(grid) x B
    lo, hi = (1 - level) / 2, 1 - (1 - level) / 2
    return {
        "n": grid,
        "mean": curves.mean(axis=1),
        "lower": np.quantile(curves, lo, axis=1),
        "upper": np.quantile(curves, hi, axis=1),
    }
