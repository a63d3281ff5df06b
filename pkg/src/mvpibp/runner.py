"""Glue between a :class:`RunConfig` and the samplers: fit, collect draw tables,
simulate datasets with recorded truth."""
from __future__ import annotations

import numpy as np

from . import __version__
from .genprior import simulate_beta_bernoulli, simulate_mvpibp
from .harness import KINDS, generate_scenario
from .io import RunConfig, ValidationError
from .mcmc import McmcConfig
from .model import CovariateDesign, FeatureMatrix, Identity, IndependentNormal, calibrate
from .sampler_factor import FactorHyper, fit_factor_mvpibp
from .sampler_ibp import fit_ibp
from .sampler_twostage import run_common_rho, run_covariate, run_flat_ablation, run_hierarchical

__all__ = ["fit_run", "simulate_run", "SIMULATORS"]

SIMULATORS = (*KINDS, "pibp", "ibp")


def _alpha_prior(cfg: RunConfig, Y: FeatureMatrix) -> tuple[float, float]:
    if cfg.a_alpha is not None:
        return cfg.a_alpha, cfg.b_alpha
    # centred on the mean number of features per sample
    return max(float(Y.entries.sum(axis=1).mean()), 1e-2), 1.0


def fit_run(cfg: RunConfig, Y: FeatureMatrix, X: np.ndarray | None = None):
    """Run the configured sampler.

    Returns ``(draws, summary, info)``: per-iteration arrays keyed by
    parameter, posterior-mean matrices, and scalar diagnostics.
    """
    if Y.p > cfg.P:
        raise ValidationError(f"data has {Y.p} feature columns, above truncation P={cfg.P}")
    rng = np.random.default_rng(cfg.seed)
    mc = McmcConfig(cfg.iterations, cfg.burn_in, cfg.thin, cfg.seed)
    a, b = _alpha_prior(cfg, Y)
    m = cfg.method
    if m == "twostage-cov" and X is None:
        raise ValidationError("method twostage-cov needs --covariates")
    if m == "ibp":
        ch = fit_ibp(Y, cfg.P, prior=(a, b), mcmc=mc, rng=rng, alpha_init=cfg.alpha)
        return {"alpha": ch.alpha_draws, "pi": ch.pi_draws}, {}, ch.config
    if m == "factor":
        hyper = FactorHyper(a_alpha=a, b_alpha=b, k_max=min(cfg.k_max, cfg.P))
        out = fit_factor_mvpibp(Y, cfg.P, hyper, mc, rng=rng, alpha_init=cfg.alpha)
        draws = {"alpha": out.alpha_draws, "beta_tilde": out.beta_tilde_draws,
                 "k_active": out.k_active_draws}
        return draws, {"sigma_mean": out.sigma_mean}, out.config
    if m in ("twostage-hier", "flat-ablation"):
        fn = run_hierarchical if m == "twostage-hier" else run_flat_ablation
        out = fn(Y, cfg.P, priors=(a, b, cfg.a_omega, cfg.b_omega), mcmc=mc, rng=rng,
                 alpha_init=cfg.alpha)
        draws = {"alpha": out.alpha_draws, "beta": out.beta_draws, "omega2": out.omega2_draws}
        return draws, {"sigma_mean": out.sigma_mean}, out.config
    if m == "twostage-common":
        out = run_common_rho(Y, cfg.P, priors=(a, b, cfg.w0), mcmc=mc, rng=rng, alpha_init=cfg.alpha)
        return {"alpha": out.alpha_draws, "beta": out.beta_draws, "rho": out.rho_draws}, {}, out.config
    if m == "twostage-cov":
        design = CovariateDesign(np.asarray(X, dtype=float), IndependentNormal())
        out = run_covariate(Y, X, cfg.P, design=design, priors=(a, b, cfg.a_omega, cfg.b_omega),
                            mcmc=mc, rng=rng, alpha_init=cfg.alpha)
        draws = {"alpha": out.alpha_draws, "beta": out.beta_draws, "coef": out.coef_draws}
        summary = {"sigma_mean": out.sigma_mean} if out.sigma_mean is not None else {}
        return draws, summary, out.config
    raise ValidationError(f"unknown method {m!r}")


def simulate_run(kind: str, alpha: float, P: int, n: int, seed: int):
    """Simulate one dataset; returns ``(Y, truth tables, info)``."""
    if kind not in SIMULATORS:
        raise ValidationError(f"unknown simulator {kind!r}; expected one of {SIMULATORS}")
    if not alpha > 0 or n < 1 or P < 2:
        raise ValidationError("need alpha > 0, n >= 1 and P >= 2")
    rng = np.random.default_rng(seed)
    info = {"kind": kind, "alpha": alpha, "P": P, "n": n, "seed": seed, "version": __version__}
    if kind in KINDS:
        Y, sc = generate_scenario(kind, alpha, n, P, rng, seed=seed)
        truth = {"beta": sc.beta, "pi": sc.pi, "sigma": sc.sigma}
        if sc.rho is not None:
            truth["rho"] = np.array([sc.rho])
        info["delta_true"] = sc.delta
    elif kind == "pibp":
        d = simulate_mvpibp(calibrate(alpha, P), Identity(), n, rng)
        Y, truth = d.matrix, {"beta": d.betas, "pi": d.pis}
    else:
        Y, pis = simulate_beta_bernoulli(alpha, n, P, rng)
        truth = {"pi": pis}
    return Y, {k: np.asarray(v, dtype=float)[None] for k, v in truth.items()}, info
