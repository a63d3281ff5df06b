"""Truncated beta-Bernoulli IBP Gibbs sampler with a gamma prior on alpha."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mcmc import LogRandomWalk, McmcConfig, gamma_logpdf, log_beta_draw
from .model import FeatureMatrix

__all__ = ["IbpChain", "fit_ibp", "ibp_alpha_log_target"]


@dataclass
class IbpChain:
    pi_draws: np.ndarray
    alpha_draws: np.ndarray
    config: dict = field(default_factory=dict)

    @property
    def pi_mean(self) -> np.ndarray:
        return self.pi_draws.mean(axis=0)


def ibp_alpha_log_target(alpha: float, sum_log_pi: float, P: int, a: float, b: float) -> float:
    """log Ga(alpha; a, b) + sum_j log Beta(pi_j; alpha / P, 1)."""
    if alpha <= 0:
        return -np.inf
    r = alpha / P
    return gamma_logpdf(alpha, a, b) + P * np.log(r) + (r - 1.0) * sum_log_pi


def fit_ibp(Y: FeatureMatrix, P: int, prior=(1.0, 1.0), mcmc: McmcConfig = McmcConfig(),
            rng: np.random.Generator | None = None, alpha_init: float | None = None,
            fix_alpha: bool = False, proposal_sd: float = 0.2) -> IbpChain:
    """Gibbs sampler for ``pi_j ~ Beta(alpha / P, 1)``, ``y_ij ~ Bern(pi_j)``.

    Columns beyond the observed ones are treated as all-zero padding up to
    ``P`` and are sampled like any other.  With ``fix_alpha`` the alpha update
    is skipped (``alpha_init`` is used throughout).
    """
    if not isinstance(Y, FeatureMatrix):
        Y = FeatureMatrix(Y)
    rng = np.random.default_rng(mcmc.seed) if rng is None else rng
    a_alpha, b_alpha = prior
    y = Y.padded(P).entries
    n = y.shape[0]
    n_j = y.sum(axis=0).astype(float)
    alpha = float(alpha_init) if alpha_init is not None else a_alpha / b_alpha
    step = LogRandomWalk(proposal_sd)

    pis = np.empty((mcmc.n_kept, P))
    alphas = np.empty(mcmc.n_kept)
    kept = 0
    for it in range(mcmc.iterations):
        log_pi, _ = log_beta_draw(alpha / P + n_j, 1.0 + n - n_j, rng)
        if not fix_alpha:
            s = float(log_pi.sum())
            alpha = step.step(alpha, lambda x: ibp_alpha_log_target(x, s, P, a_alpha, b_alpha),
                              rng, adapt=it < mcmc.burn_in)
        if mcmc.keep(it):
            pis[kept] = np.exp(log_pi)
            alphas[kept] = alpha
            kept += 1
    np.clip(pis, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg, out=pis)
    config = dict(burn_in=mcmc.burn_in, iterations=mcmc.iterations, thin=mcmc.thin,
                  seed=mcmc.seed, P=P, a_alpha=a_alpha, b_alpha=b_alpha,
                  acceptance=step.acceptance)
    return IbpChain(pis, alphas, config)


def ibp_pi_posterior_mean(n_j, n: int, alpha: float, P: int):
    """Conjugate posterior mean of pi_j at fixed alpha."""
    a = alpha / P + np.asarray(n_j, dtype=float)
    return a / (a + 1.0 + n - np.asarray(n_j, dtype=float))

