import os

import numpy as np
import pytest
from scipy import integrate, optimize, special, stats

from mvpibp.genprior import simulate_covariate_mvpibp, simulate_mvpibp
from mvpibp.harness import frob_error, generate_scenario
from mvpibp.mcmc import McmcConfig
from mvpibp.model import NIW, CommonRho, CovariateDesign, Identity, IndependentNormal, calibrate
from mvpibp.sampler_factor import niw_update
from mvpibp.sampler_twostage import (PairPosterior, laplace_beta, laplace_counts, omega2_update,
                                     pair_posteriors_from_counts, pair_sigma_posterior, run_common_rho,
                                     run_covariate, run_flat_ablation, run_hierarchical)

FULL = os.environ.get("MVPIBP_FULL") == "1"


def _logpost(b, n1, n, mu, tau):
    return n1 * special.log_ndtr(b) + (n - n1) * special.log_ndtr(-b) - 0.5 * ((b - mu) / tau) ** 2


def test_laplace_all_zero_column_matches_search_oracle():
    mu, tau, n = -6.5, 3.38, 50
    fit = laplace_beta(np.zeros(n), (mu, tau))
    grid = np.linspace(-15, 5, 200_001)
    b0 = grid[np.argmax(_logpost(grid, 0, n, mu, tau))]
    ref = optimize.minimize_scalar(lambda b: -_logpost(b, 0, n, mu, tau), bracket=(b0 - 1e-3, b0, b0 + 1e-3),
                                   tol=1e-12).x
    assert fit.beta_hat == pytest.approx(ref, abs=1e-6)
    assert fit.beta_hat < special.ndtri(1 / 52)


def test_laplace_prior_only_and_balanced():
    fit = laplace_beta(np.zeros(0), (-2.0, 1.5))
    assert fit.beta_hat == -2.0 and fit.Q == pytest.approx(1.5**2, abs=1e-15)
    y = np.r_[np.ones(50), np.zeros(50)]
    assert abs(laplace_beta(y, (3.0, 1e3)).beta_hat) < 1e-3
    with pytest.raises(ValueError):
        laplace_beta(y, (0.0, 0.0))


def test_laplace_gradient_and_curvature():
    n = 80
    n1 = np.arange(n + 1)
    mu, tau = -4.0, 3.0
    b, Q = laplace_counts(n1, n, mu, tau)
    h = 1e-5
    g = (_logpost(b + h, n1, n, mu, tau) - _logpost(b - h, n1, n, mu, tau)) / (2 * h)
    assert np.max(np.abs(g)) < 1e-4  # finite-difference noise dominates the 1e-8 Newton tolerance
    curv = (_logpost(b + h, n1, n, mu, tau) - 2 * _logpost(b, n1, n, mu, tau) + _logpost(b - h, n1, n, mu, tau)) / h**2
    np.testing.assert_allclose(Q, -1 / curv, rtol=1e-3)
    assert np.all(Q > 0) and np.all(np.diff(b) > 0)


def test_laplace_with_covariates():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(400)
    y = rng.random(400) < special.ndtr(-0.3 + 0.8 * x)
    fit = laplace_beta(y, (np.zeros(2), np.eye(2) * 100.0), X=x)
    assert abs(fit.beta_hat[0] + 0.3) < 0.25 and abs(fit.beta_hat[1] - 0.8) < 0.25
    assert np.all(np.linalg.eigvalsh(fit.Q) > 0)


def test_laplace_contraction_rate():
    rng = np.random.default_rng(1)
    beta, sds = -0.5, []
    for n in (100, 400, 1600):
        n1 = rng.binomial(n, special.ndtr(beta), size=4000)
        b, _ = laplace_counts(n1, n, -1.0, 3.0)
        sds.append(b.std(ddof=1))
        assert abs(b.mean() - beta) < 0.05
    ratios = np.array(sds[:-1]) / np.array(sds[1:])
    assert np.all(np.abs(ratios - 2.0) < 0.6)


def _pair(sigma, beta, n, rng):
    cov = np.array([[1, sigma], [sigma, 1]])
    z = np.asarray(beta) + rng.standard_normal((n, 2)) @ np.linalg.cholesky(cov).T
    return (z > 0).astype(int)


def _pseudo(y):
    return tuple(laplace_beta(y[:, j], (0.0, 3.0)) for j in range(2))


def test_pair_posterior_independent_pair():
    rng = np.random.default_rng(2)
    y = _pair(0.0, (-0.4, 0.2), 500, rng)
    post = pair_sigma_posterior(y[:, 0], y[:, 1], _pseudo(y), omega=1.0)
    assert abs(post.sigma_hat) < 0.1
    assert abs(post.sigma_hat) < 3 * np.sqrt(post.s2)


def test_pair_posterior_dependent_pair():
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        y = _pair(0.7, (0.3, 0.1), 500, rng)
        post = pair_sigma_posterior(y[:, 0], y[:, 1], _pseudo(y), omega=1.0)
        assert 0.5 < post.sigma_hat < 0.85, seed


def test_pair_posterior_prior_only():
    omega = 0.5
    y = np.zeros((0, 2))
    post = pair_sigma_posterior(y[:, 0], y[:, 1], _pseudo(y), omega=omega)
    dens = stats.norm(0, omega).pdf
    ref = integrate.quad(lambda z: np.tanh(z) ** 2 * dens(z), -10, 10, epsabs=1e-13)[0]
    assert abs(post.sigma_hat) < 1e-12
    assert post.s2 == pytest.approx(ref, abs=1e-6)


def test_pair_posterior_validation_and_chunking():
    with pytest.raises(ValueError):
        PairPosterior(1.0, 0.1)
    with pytest.raises(ValueError):
        pair_sigma_posterior(np.zeros(3), np.zeros(4), _pseudo(np.zeros((3, 2))), 1.0)
    rng = np.random.default_rng(3)
    b1, b2 = rng.normal(-1, 1, 50), rng.normal(-1, 1, 50)
    n = 60
    n11 = rng.integers(0, 10, 50)
    n10, n01 = rng.integers(0, 10, 50), rng.integers(0, 10, 50)
    counts = (n11, n10, n01, n - n11 - n10 - n01)
    a = pair_posteriors_from_counts(b1, b2, counts, 0.7)
    b = pair_posteriors_from_counts(b1, b2, counts, 0.7, chunk=7)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert np.all(np.abs(a[0]) < 1) and np.all(a[1] > 0)


def test_omega2_conjugate_step():
    rng = np.random.default_rng(4)
    draws = np.array([omega2_update(np.zeros(3), 3, 1.0, 1.0, rng) for _ in range(100_000)])
    # IG(4, 1): mean 1/3, variance 1/18
    se = np.sqrt(1 / 18 / draws.size)
    assert abs(draws.mean() - 1 / 3) < 3 * se


def test_hierarchical_output_shapes():
    Y = simulate_mvpibp(calibrate(5, 30), Identity(), 20, np.random.default_rng(5)).matrix
    out = run_hierarchical(Y, 30, T=40, rng=np.random.default_rng(5), store_sigma_draws=True)
    assert out.alpha_draws.shape == (30,) and out.beta_draws.shape == (30, 30)
    assert out.sigma_draws.shape == (30, 435) and np.all(np.abs(out.sigma_draws) < 1)
    np.testing.assert_array_equal(np.diag(out.sigma_mean), 1.0)
    assert np.all(out.omega2_draws > 0)
    with pytest.raises(ValueError):
        run_hierarchical(Y, 10, T=10)
    with pytest.raises(ValueError):
        run_hierarchical(Y, 30, T=10, alpha_target="other")


def test_hierarchical_alpha_recovery():
    rng = np.random.default_rng(6)
    Y = simulate_mvpibp(calibrate(20, 300), Identity(), 80, rng).matrix
    prior = (float(Y.entries.sum(axis=1).mean()), 1.0, 1.0, 1.0)
    out = run_hierarchical(Y, 300, prior, T=200, rng=np.random.default_rng(7))
    assert abs(out.alpha_draws.mean() - 20) < 0.25 * 20


@pytest.mark.parametrize("rho,tol", [(0.0, 0.05), (0.5, 0.1)])
def test_common_rho_recovery(rho, tol):
    rng = np.random.default_rng(8)
    Y = simulate_mvpibp(calibrate(15, 50), CommonRho(rho), 200, rng).matrix
    out = run_common_rho(Y, 50, (15.0, 1.0, 1.0), T=300, rng=np.random.default_rng(9))
    assert abs(out.rho_draws.mean() - rho) < tol
    S = out.sigma_hat
    np.testing.assert_allclose(np.diag(S), 1.0)


def test_common_rho_pinned_by_tiny_prior():
    Y = simulate_mvpibp(calibrate(15, 50), CommonRho(0.5), 100, np.random.default_rng(10)).matrix
    out = run_common_rho(Y, 50, (15.0, 1.0, 1e-4), T=100, rng=np.random.default_rng(10))
    assert np.all(np.abs(out.rho_draws) < 1e-3)
    with pytest.raises(ValueError):
        run_common_rho(Y, 50, (1.0, 1.0, 0.0), T=10)


def test_niw_zero_data_update():
    prior = NIW(np.zeros(1), 1.0, 3.0, np.eye(1))
    rng = np.random.default_rng(11)
    m = 2
    psis = []
    for _ in range(40_000):
        gamma, Psi, (g_n, iota_n, d_n, Xi_n) = niw_update(np.zeros((m, 1)), prior, rng)
        psis.append(Psi[0, 0])
    assert g_n[0] == 0.0 and Xi_n[0, 0] == 1.0
    assert iota_n == 1.0 + m and d_n == 3.0 + m
    psis = np.array(psis)
    q = 1
    mean = Xi_n[0, 0] / (d_n - q - 1)
    assert abs(psis.mean() - mean) < 3 * psis.std(ddof=1) / np.sqrt(psis.size)


def test_covariate_slope_recovery():
    n, P = 150, 100
    rng = np.random.default_rng(12)
    x = rng.standard_normal(n)
    # a zero Psi gives every species the same slope
    design = CovariateDesign(x, IndependentNormal(gamma=[0.5]), Psi=np.zeros((1, 1)))
    draw = simulate_covariate_mvpibp(calibrate(20, P), Identity(), design, n, rng)
    fit_design = CovariateDesign(x, NIW(np.zeros(1), 1.0, 3.0, np.eye(1)))
    out = run_covariate(draw.matrix, x, P, fit_design, (20.0, 1.0, 1.0, 1.0), T=100,
                        rng=np.random.default_rng(13), pair_stage="none")
    assert abs(out.gamma_draws.mean() - 0.5) < 0.15


def test_covariate_pair_stage_recovers_dependence():
    n, P = 300, 8
    rng = np.random.default_rng(17)
    x = rng.integers(0, 2, n).astype(float)  # two design rows
    design = CovariateDesign(x, IndependentNormal(gamma=[0.8]), Psi=np.zeros((1, 1)))
    draw = simulate_covariate_mvpibp(calibrate(4, P), CommonRho(0.6), design, n, rng,
                                     betas=np.full(P, -0.3))
    out = run_covariate(draw.matrix, x, P, CovariateDesign(x, IndependentNormal(1.0)), (4.0, 1.0, 1.0, 1.0),
                        T=60, rng=np.random.default_rng(18))
    off = out.sigma_mean[np.triu_indices(P, 1)]
    assert abs(np.median(off) - 0.6) < 0.15
    np.testing.assert_allclose(np.diag(out.sigma_mean), 1.0)
    assert out.coef_draws.shape == (45, P, 1) and out.omega2_draws.size == 5


def test_covariate_null_design_matches_hierarchical():
    rng = np.random.default_rng(14)
    Y = simulate_mvpibp(calibrate(6, 20), Identity(), 30, rng).matrix
    j = int(np.argmax(Y.entries.sum(axis=0)))
    mc = McmcConfig(2300, 300, seed=15)
    cov = run_covariate(Y, np.zeros(30), 20, CovariateDesign(np.zeros(30), IndependentNormal(1.0)),
                        (6.0, 1.0, 1.0, 1.0), mcmc=mc, pair_stage="none")
    hier = run_hierarchical(Y, 20, (6.0, 1.0, 1.0, 1.0), mcmc=McmcConfig(2300, 300, seed=16))
    a, b = cov.pi_draws[::5, j], hier.pi_draws[::5, j]
    assert stats.ks_2samp(a, b).pvalue > 0.001


@pytest.mark.skipif(not FULL, reason="full-size replication; set MVPIBP_FULL=1")
def test_common_scenario_beats_flat_ablation():
    wins = 0
    for rep in range(20):
        rng = np.random.default_rng(700 + rep)
        Y, sc = generate_scenario("common", 2.0 * (rep + 1), 80, 300, rng)
        prior = (float(Y.entries.sum(axis=1).mean()), 1.0, 1.0, 1.0)
        hier = run_hierarchical(Y, 300, prior, T=200, rng=np.random.default_rng(rep))
        flat = run_flat_ablation(Y, 300, prior, T=200, rng=np.random.default_rng(rep))
        wins += frob_error(hier.sigma_hat, sc.sigma) < frob_error(flat.sigma_hat, sc.sigma)
    assert wins >= 14

