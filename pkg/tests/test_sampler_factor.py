import os

import numpy as np
import pytest
from scipy import integrate, special, stats

from mvpibp.genprior import simulate_mvpibp
from mvpibp.harness import generate_scenario
from mvpibp.mcmc import LogRandomWalk, McmcConfig, batch_means_se
from mvpibp.model import CuspHyper, Identity, calibrate, calibrated_mu
from mvpibp.numkit import LowRankCorrelation
from mvpibp.sampler_factor import (FactorHyper, _update_beta_collapsed, _update_z,
                                   alpha_log_target, beta_tilde_moments, cusp_indicator_logprobs,
                                   fit_factor_mvpibp, gibbs_cycle, init_state, mh_update_alpha,
                                   stick_weights)
from mvpibp.sampler_ibp import fit_ibp

FULL = os.environ.get("MVPIBP_FULL") == "1"


def _pibp(alpha, n, P, seed):
    rng = np.random.default_rng(seed)
    return simulate_mvpibp(calibrate(alpha, P), Identity(), n, rng)


def test_beta_moments_reduce_to_conjugate_normal_at_zero_loadings():
    rng = np.random.default_rng(0)
    n, P, mu, tau = 30, 7, -1.3, 1.9
    Z = rng.standard_normal((n, P)) - 1.0
    mean, prec, _ = beta_tilde_moments(Z, np.zeros((P, 2)), mu, tau)
    v = 1.0 / (tau**-2 + n)
    np.testing.assert_allclose(mean, v * (mu / tau**2 + Z.sum(axis=0)), atol=1e-12)
    np.testing.assert_allclose(prec, np.diag(np.full(P, tau**-2 + n)), atol=1e-12)


def test_beta_moments_smw_equals_dense():
    rng = np.random.default_rng(1)
    for k in (1, 3, 5):
        lam = rng.normal(scale=0.8, size=(40, k))
        Z = rng.standard_normal((25, 40))
        m1, p1, _ = beta_tilde_moments(Z, lam, -2.0, 2.5)
        m2, p2, _ = beta_tilde_moments(Z, lam, -2.0, 2.5, dense=True)
        np.testing.assert_allclose(m1, m2, atol=1e-8)
        np.testing.assert_allclose(p1, p2, atol=1e-8)


def test_z_signs_match_data():
    Y = _pibp(10, 30, 40, 2).matrix.entries
    rng = np.random.default_rng(2)
    state = init_state(Y, FactorHyper(), rng)
    for _ in range(3):
        gibbs_cycle(state, Y, FactorHyper(), rng)
        _update_z(state, Y.astype(bool), None, rng)
        assert np.array_equal(state.Z > 0, Y.astype(bool))


def test_state_invariants_after_cycles():
    Y = _pibp(8, 25, 30, 3).matrix.entries
    rng = np.random.default_rng(3)
    hyper = FactorHyper()
    state = init_state(Y, hyper, rng)
    for _ in range(20):
        gibbs_cycle(state, Y, hyper, rng)
        idx = np.arange(1, state.K + 1)
        spike = state.S <= idx
        assert np.all(state.theta[spike] == hyper.cusp.theta_inf)
        assert np.all(state.theta[~spike] > 0)
        sig = state.sigma()
        np.testing.assert_allclose(np.diag(sig), 1.0, atol=1e-10)
        np.linalg.cholesky(sig)
        assert stick_weights(state.nu).sum() == pytest.approx(1.0, abs=1e-12)


def test_cusp_indicator_logprobs_against_scipy():
    rng = np.random.default_rng(4)
    cusp = CuspHyper()
    lam = rng.normal(scale=0.5, size=(6, 3))
    omega = np.array([0.5, 0.3, 0.2])
    lp = cusp_indicator_logprobs(lam, omega, cusp)
    spike = stats.multivariate_normal(np.zeros(6), cusp.theta_inf * np.eye(6))
    slab = stats.multivariate_t(np.zeros(6), cusp.b_theta / cusp.a_theta * np.eye(6), df=2 * cusp.a_theta)
    for k in range(3):
        for l in range(3):
            dens = spike.logpdf(lam[:, k]) if l <= k else slab.logpdf(lam[:, k])
            assert lp[k, l] == pytest.approx(np.log(omega[l]) + dens, abs=1e-10)


def test_cusp_spike_equals_slab_gives_prior_weights():
    # a huge slab shape with matched scale makes the t slab the spike normal;
    # the residual is O(P^2 / df) ~ 1e-6 here
    theta = 0.05
    cusp = CuspHyper(a_theta=1e7, b_theta=theta * 1e7, theta_inf=theta)
    lam = np.random.default_rng(5).normal(scale=0.3, size=(10, 2))
    omega = np.array([0.35, 0.65])
    lp = cusp_indicator_logprobs(lam, omega, cusp)
    prob = np.exp(lp[0] - special.logsumexp(lp[0]))
    np.testing.assert_allclose(prob, omega, atol=1e-5)


def test_alpha_step_identity_ratio():
    alpha0, P = 3.0, 1
    bt = np.array([calibrated_mu(alpha0, 2)])  # P=1 has tau=0; use the P=2 template value
    tau = np.sqrt(2 * np.log(2))
    assert alpha_log_target(alpha0, bt, 2, tau, 1, 1) - alpha_log_target(alpha0, bt, 2, tau, 1, 1) == 0.0
    # a zero-scale proposal always proposes alpha0 and must accept
    step = LogRandomWalk(0.0)
    out = mh_update_alpha(alpha0, np.append(bt, bt), 2, rng=np.random.default_rng(0), step=step)
    assert out == alpha0 and step.accepted == 1 and P == 1


def _alpha_posterior_mean(bt, P, a, b):
    tau = np.sqrt(2 * np.log(P))
    f = lambda x: np.exp(alpha_log_target(x, bt, P, tau, a, b) - ref)  # noqa: E731
    ref = alpha_log_target(10.0, bt, P, tau, a, b)
    z = integrate.quad(f, 1e-3, 200, points=[5, 10, 20], limit=200)[0]
    return integrate.quad(lambda x: x * f(x), 1e-3, 200, points=[5, 10, 20], limit=200)[0] / z


def test_alpha_recovery_given_fixed_intercepts():
    P = 300
    rng = np.random.default_rng(6)
    cal = calibrate(10.0, P)
    bt = cal.mu_p + cal.tau_p * rng.standard_normal(P)
    alpha, step, draws = 10.0, LogRandomWalk(0.25), []
    for it in range(5000):
        alpha = mh_update_alpha(alpha, bt, P, (1.0, 1.0), rng, step, adapt=it < 500)
        draws.append(alpha)
    draws = np.array(draws[500:])
    assert abs(draws.mean() - 10.0) < 1.5
    exact = _alpha_posterior_mean(bt, P, 1.0, 1.0)
    assert abs(draws.mean() - exact) < 3 * batch_means_se(draws)


def test_alpha_prior_only_moments():
    a, b = 3.0, 2.0
    rng = np.random.default_rng(7)
    alpha, step, draws = 1.0, LogRandomWalk(0.6), np.empty(40_000)
    for it in range(draws.size):
        alpha = mh_update_alpha(alpha, None, 50, (a, b), rng, step, likelihood=False)
        draws[it] = alpha
    draws = draws[2000:]
    assert abs(draws.mean() - a / b) < 3 * batch_means_se(draws)
    sq = (draws - a / b) ** 2
    assert abs(sq.mean() - a / b**2) < 3 * batch_means_se(sq)


def test_collapsed_beta_draw_distribution():
    rng = np.random.default_rng(8)
    Y = _pibp(5, 20, 6, 8).matrix.entries
    state = init_state(Y, FactorHyper(k_init=2), rng)
    state.Lambda = rng.normal(scale=0.7, size=(6, 2))
    mu, tau = -1.0, 1.5
    mean, prec, _ = beta_tilde_moments(state.Z, state.Lambda, mu, tau)
    draws = np.empty((20_000, 6))
    for i in range(draws.shape[0]):
        _update_beta_collapsed(state, None, mu, tau, rng)
        draws[i] = state.beta_tilde
    cov = np.linalg.inv(prec)
    np.testing.assert_allclose(draws.mean(axis=0), mean, atol=4 * np.sqrt(cov.diagonal().max() / 20_000))
    np.testing.assert_allclose(np.cov(draws.T), cov, atol=0.05 * cov.diagonal().max())


def test_deterministic_replay():
    Y = _pibp(6, 20, 25, 9).matrix
    mc = McmcConfig(120, 40, seed=9)
    a = fit_factor_mvpibp(Y, 25, FactorHyper(adapt_start=50), mc)
    b = fit_factor_mvpibp(Y, 25, FactorHyper(adapt_start=50), mc)
    assert np.array_equal(a.beta_tilde_draws, b.beta_tilde_draws)
    assert np.array_equal(a.alpha_draws, b.alpha_draws)
    assert np.array_equal(a.sigma_mean, b.sigma_mean)


def test_stored_sigma_draws_are_correlations():
    Y = _pibp(6, 20, 25, 10).matrix
    out = fit_factor_mvpibp(Y, 25, FactorHyper(adapt_start=30), McmcConfig(150, 50, seed=10),
                            store_sigma_every=10)
    assert len(out.sigma_draws) == 10
    for sig in out.sigma_draws:
        np.testing.assert_allclose(np.diag(sig), 1.0, atol=1e-10)
        np.linalg.cholesky(sig)
    assert out.beta_tilde_draws.shape == (100, 25)
    assert np.all(out.k_active_draws >= 0)


def test_config_errors():
    with pytest.raises(ValueError):
        FactorHyper(beta_step="sideways")
    with pytest.raises(ValueError):
        FactorHyper(k_max=0)
    with pytest.raises(ValueError):
        fit_factor_mvpibp(np.zeros((3, 4)), 3, FactorHyper(), McmcConfig(10, 2))


def test_identity_data_gives_small_correlations():
    Y = _pibp(10, 200, 50, 11).matrix
    out = fit_factor_mvpibp(Y, 50, FactorHyper(), McmcConfig(1500, 500, seed=11))
    off = np.abs(out.sigma_mean[np.triu_indices(50, 1)])
    assert np.median(off) < 0.1


def test_k_star_recovery_with_strong_loadings():
    n, P, k = 200, 50, 3
    hits = 0
    for rep in range(10):
        rng = np.random.default_rng(100 + rep)
        lam = 1.5 * rng.standard_normal((P, k))
        cal = calibrate(20.0, P)
        Y = simulate_mvpibp(cal, LowRankCorrelation(lam), n, rng).matrix
        out = fit_factor_mvpibp(Y, P, FactorHyper(k_max=10), McmcConfig(1500, 700, seed=rep))
        vals, counts = np.unique(out.k_active_draws, return_counts=True)
        hits += vals[np.argmax(counts)] == k
    assert hits >= 5


@pytest.mark.skipif(not FULL, reason="full-size replication; set MVPIBP_FULL=1")
def test_factor_scenario_beats_ibp_on_pi():
    wins = 0
    for rep in range(20):
        rng = np.random.default_rng(500 + rep)
        Y, sc = generate_scenario("factor", 2.0 * (rep + 1), 80, 300, rng)
        prior = (float(Y.entries.sum(axis=1).mean()), 1.0)
        mc = McmcConfig(2500, 500, seed=rep)
        fac = fit_factor_mvpibp(Y, 300, FactorHyper(a_alpha=prior[0], b_alpha=prior[1]), mc)
        ibp = fit_ibp(Y, 300, prior, mc)
        wins += np.mean((fac.pi_mean - sc.pi) ** 2) < np.mean((ibp.pi_mean - sc.pi) ** 2)
    assert wins >= 16
