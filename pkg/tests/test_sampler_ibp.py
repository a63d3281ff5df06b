import numpy as np
import pytest
from scipy import stats

from mvpibp.genprior import simulate_beta_bernoulli
from mvpibp.mcmc import McmcConfig, gamma_logpdf, geweke_z
from mvpibp.model import FeatureMatrix
from mvpibp.sampler_ibp import fit_ibp, ibp_alpha_log_target


def _mc_se(x):
    return x.std(ddof=1) / np.sqrt(x.size)


def test_prior_only_column_mean():
    # n = 1 all-zero row, alpha fixed at 1, P = 10: pi | y ~ Beta(0.1, 2)
    out = fit_ibp(np.zeros((1, 10)), 10, mcmc=McmcConfig(4000, 0, seed=1), alpha_init=1.0, fix_alpha=True)
    assert abs(out.pi_draws.mean() - 0.1 / 2.1) < 3 * _mc_se(out.pi_draws.ravel())
    assert np.all(out.alpha_draws == 1.0)


def test_all_ones_column():
    alpha = 3.0
    out = fit_ibp(np.ones((20, 1)), 1, mcmc=McmcConfig(6000, 0, seed=2), alpha_init=alpha, fix_alpha=True)
    assert abs(out.pi_draws.mean() - (alpha + 20) / (alpha + 21)) < 3 * _mc_se(out.pi_draws.ravel())


def test_single_update_is_exact_beta():
    y = np.array([[1, 0], [1, 1]])
    mc = McmcConfig(100_000, 0, seed=3)
    out = fit_ibp(y, 2, mcmc=mc, alpha_init=0.7, fix_alpha=True)
    a = 0.7 / 2
    for j, nj in enumerate([2, 1]):
        ks = stats.kstest(out.pi_draws[:, j], stats.beta(a + nj, 1 + 2 - nj).cdf)
        assert ks.pvalue > 0.001


def test_chain_invariants():
    Y = FeatureMatrix(np.eye(4, 6, dtype=np.int8))
    mc = McmcConfig(300, 100, thin=2, seed=4)
    out = fit_ibp(Y, 50, mcmc=mc)
    assert out.pi_draws.shape == (100, 50) and out.alpha_draws.shape == (100,)
    assert np.all((out.pi_draws > 0) & (out.pi_draws < 1))
    assert np.all(out.alpha_draws > 0)
    for key in ("burn_in", "iterations", "seed", "P", "a_alpha", "b_alpha"):
        assert key in out.config


def test_invalid_inputs():
    with pytest.raises(ValueError):
        McmcConfig(100, 100)
    with pytest.raises(ValueError):
        fit_ibp(np.array([[2, 0]]), 5)
    with pytest.raises(ValueError):
        fit_ibp(np.zeros((2, 6)), 5)


def test_alpha_target_matches_scipy():
    rng = np.random.default_rng(0)
    P, a, b = 30, 2.0, 0.5
    pi = rng.beta(0.2, 1, P)
    for alpha in (0.3, 4.0, 17.0):
        ref = stats.gamma(a, scale=1 / b).logpdf(alpha) + stats.beta(alpha / P, 1).logpdf(pi).sum()
        got = ibp_alpha_log_target(alpha, float(np.log(pi).sum()), P, a, b)
        assert got == pytest.approx(ref, abs=1e-9)
        assert gamma_logpdf(alpha, a, b) == pytest.approx(stats.gamma(a, scale=1 / b).logpdf(alpha), abs=1e-12)
    assert ibp_alpha_log_target(0.0, -1.0, P, a, b) == -np.inf


def test_generate_and_recover_beats_pooled_mean():
    wins = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        Ym, pi = simulate_beta_bernoulli(10.0, 80, 300, rng)
        Y = Ym.entries
        out = fit_ibp(Y, 300, prior=(float(Y.sum(axis=1).mean()), 1.0),
                      mcmc=McmcConfig(600, 200, seed=seed))
        null = np.full(300, Y.mean())
        wins += np.mean((out.pi_mean - pi) ** 2) < np.mean((null - pi) ** 2)
    assert wins == 20


def test_alpha_chain_stationary_on_flat_data():
    rng = np.random.default_rng(8)
    Y = (rng.random((40, 30)) < 0.1).astype(int)
    prior = (float(Y.sum(axis=1).mean()), 1.0)
    out = fit_ibp(Y, 100, prior=prior, mcmc=McmcConfig(6000, 1000, seed=8))
    assert abs(geweke_z(out.alpha_draws)) < 3
