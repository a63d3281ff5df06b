"""Gibbs sampler for the factor MVP-IBP with a cumulative shrinkage (CUSP)
prior on the loadings.

Parametrisation.  The sampler carries the unscaled latent model

    z_ij = beta_j + x_i' b_j + lambda_j' eta_i + e_ij,   e_ij ~ N(0, 1),

and the scaled intercepts ``beta_tilde_j = beta_j / d_j`` with
``d_j = sqrt(1 + |lambda_j|^2)`` carry the N(mu_P, tau_P^2) prior.  Every
update below is an exact full conditional (or an exact Metropolis correction
of one), so the chain targets the joint posterior:

1. Z from truncated normals;
4. beta_tilde | Z, Lambda with the factors integrated out (Sigma^-1 applied
   through the low-rank identity), then
2. eta | Z, beta, Lambda, which together with step 4 is a block draw of
   (beta, eta);
3. rows of Lambda: the conjugate Gaussian given (Z, eta, beta) is used as an
   independence proposal and corrected for the dependence of the beta prior
   on d_j;
5. alpha by random-walk Metropolis on log alpha;
6-8. CUSP indicators, stick-breaking weights and column scales.

``beta_step="conditional"`` swaps step 4 for the per-coordinate conjugate
update given eta, which allows the literal 1, 2, ..., 8 order.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .mcmc import LogRandomWalk, McmcConfig, NumericalFailure, gamma_logpdf
from .model import NIW, CovariateDesign, CuspHyper, FeatureMatrix, calibrated_mu
from .numkit import LowRankCorrelation, sample_truncated_normal, smw_solve

__all__ = [
    "FactorHyper",
    "FactorChainState",
    "FactorChainOutput",
    "init_state",
    "gibbs_cycle",
    "mh_update_alpha",
    "alpha_log_target",
    "fit_factor_mvpibp",
    "beta_tilde_moments",
    "niw_update",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FactorHyper:
    cusp: CuspHyper = field(default_factory=CuspHyper)
    a_alpha: float = 1.0
    b_alpha: float = 1.0
    k_max: int | None = None  # defaults to min(P, 30)
    k_init: int | None = None  # defaults to min(k_max, 10)
    alpha_sd: float = 0.25
    beta_step: str = "collapsed"
    adapt: bool = True
    adapt_start: int = 200
    adapt_a0: float = -1.0
    adapt_a1: float = -5e-4
    fix_alpha: bool = False
    # extra Metropolis move translating alpha and the all-zero columns' intercepts together
    shift_move: bool = True

    def __post_init__(self):
        if self.beta_step not in ("collapsed", "conditional"):
            raise ValueError(f"unknown beta_step {self.beta_step!r}")
        for name in ("k_max", "k_init"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be >= 1, got {v}")


@dataclass
class FactorChainState:
    Z: np.ndarray
    eta: np.ndarray
    Lambda: np.ndarray
    beta: np.ndarray  # unscaled intercepts
    alpha: float
    S: np.ndarray  # 1-based CUSP indicators
    nu: np.ndarray
    theta: np.ndarray
    B: np.ndarray | None = None  # P x q covariate coefficients
    gamma: np.ndarray | None = None
    Psi: np.ndarray | None = None

    @property
    def K(self) -> int:
        return self.Lambda.shape[1]

    @property
    def scale(self) -> np.ndarray:
        return np.sqrt(1.0 + np.einsum("jk,jk->j", self.Lambda, self.Lambda))

    @property
    def beta_tilde(self) -> np.ndarray:
        return self.beta / self.scale

    @property
    def omega(self) -> np.ndarray:
        return stick_weights(self.nu)

    @property
    def active(self) -> np.ndarray:
        return self.S > np.arange(1, self.K + 1)

    @property
    def k_active(self) -> int:
        return int(self.active.sum())

    def sigma(self) -> np.ndarray:
        return LowRankCorrelation(self.Lambda).dense()

    def copy(self) -> "FactorChainState":
        return copy.deepcopy(self)


@dataclass
class FactorChainOutput:
    beta_tilde_draws: np.ndarray
    alpha_draws: np.ndarray
    k_active_draws: np.ndarray
    sigma_mean: np.ndarray
    sigma_sq_mean: np.ndarray
    sigma_draws: list = field(default_factory=list)
    coef_draws: np.ndarray | None = None
    gamma_draws: np.ndarray | None = None
    config: dict = field(default_factory=dict)
    final_state: FactorChainState | None = None

    @property
    def pi_draws(self) -> np.ndarray:
        return special.ndtr(self.beta_tilde_draws)

    @property
    def pi_mean(self) -> np.ndarray:
        return self.pi_draws.mean(axis=0)


def stick_weights(nu: np.ndarray) -> np.ndarray:
    rest = np.concatenate([[1.0], np.cumprod(1.0 - nu[:-1])])
    return nu * rest


def _nu_from_weights(w: np.ndarray) -> np.ndarray:
    rest = 1.0 - np.concatenate([[0.0], np.cumsum(w[:-1])])
    nu = np.where(rest > 0, w / np.maximum(rest, 1e-300), 1.0)
    nu[-1] = 1.0
    return np.clip(nu, 0.0, 1.0)


# -- individual updates ---------------------------------------------------------

def _linear_offset(state: FactorChainState, X) -> np.ndarray | float:
    if state.B is None or X is None:
        return 0.0
    return X @ state.B.T


def _update_z(state, y_pos, X, rng):
    mean = state.beta + _linear_offset(state, X) + state.eta @ state.Lambda.T
    state.Z = sample_truncated_normal(mean, 1.0, y_pos, rng)


def beta_tilde_moments(Z_centered: np.ndarray, Lambda: np.ndarray, mu: float, tau: float,
                       dense: bool = False):
    """Mean and precision of beta_tilde | Z, Lambda with the factors integrated out.

    ``Z_centered`` is the n x P latent matrix with covariate effects removed.
    """
    n, P = Z_centered.shape
    lr = LowRankCorrelation(Lambda)
    d = lr.scale
    zbar = (Z_centered / d).mean(axis=0)
    if dense:
        sig_inv = np.linalg.inv(lr.dense())
        sz = sig_inv @ zbar
    else:
        sz = smw_solve(lr, zbar)
        m_chol = np.linalg.cholesky(np.eye(lr.k) + Lambda.T @ Lambda)
        w = np.linalg.solve(m_chol, (d[:, None] * Lambda).T)  # k x P
        sig_inv = np.diag(d * d) - w.T @ w
    prec = n * sig_inv
    prec[np.diag_indices(P)] += 1.0 / tau**2
    rhs = mu / tau**2 + n * sz
    chol = np.linalg.cholesky(prec)
    mean = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    return mean, prec, chol


def _update_beta_collapsed(state, X, mu, tau, rng):
    zc = state.Z - _linear_offset(state, X)
    mean, _, chol = beta_tilde_moments(zc, state.Lambda, mu, tau)
    bt = mean + np.linalg.solve(chol.T, rng.standard_normal(mean.size))
    state.beta = bt * state.scale


def _update_beta_conditional(state, X, mu, tau, rng):
    n = state.Z.shape[0]
    d = state.scale
    r = (state.Z - _linear_offset(state, X) - state.eta @ state.Lambda.T).sum(axis=0)
    prior_prec = 1.0 / (d * d * tau * tau)
    prec = n + prior_prec
    mean = (r + d * mu * prior_prec) / prec
    state.beta = mean + rng.standard_normal(mean.size) / np.sqrt(prec)


def _update_eta(state, X, rng):
    lam = state.Lambda
    K = lam.shape[1]
    prec = lam.T @ lam + np.eye(K)
    chol = np.linalg.cholesky(prec)
    resid = state.Z - state.beta - _linear_offset(state, X)
    rhs = resid @ lam  # n x K
    mean = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs.T)).T
    noise = np.linalg.solve(chol.T, rng.standard_normal((K, resid.shape[0]))).T
    state.eta = mean + noise


def _log_beta_prior_given_scale(beta, d, mu, tau):
    # density of unscaled beta when beta / d ~ N(mu, tau^2), up to a constant
    return -np.log(d) - 0.5 * ((beta / d - mu) / tau) ** 2


def _update_lambda(state, X, mu, tau, rng):
    eta = state.eta
    K = eta.shape[1]
    prec = np.diag(1.0 / state.theta) + eta.T @ eta
    chol = np.linalg.cholesky(prec)
    resid = state.Z - state.beta - _linear_offset(state, X)  # n x P
    rhs = eta.T @ resid  # K x P
    mean = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    prop = (mean + np.linalg.solve(chol.T, rng.standard_normal((K, resid.shape[1])))).T
    d_old = state.scale
    d_new = np.sqrt(1.0 + np.einsum("jk,jk->j", prop, prop))
    log_ratio = (_log_beta_prior_given_scale(state.beta, d_new, mu, tau)
                 - _log_beta_prior_given_scale(state.beta, d_old, mu, tau))
    accept = np.log(rng.random(prop.shape[0])) < log_ratio
    state.Lambda = np.where(accept[:, None], prop, state.Lambda)
    return accept.mean()


def _update_coefs(state, X, rng):
    """Conjugate b_j | rest for b_j ~ N(gamma, Psi)."""
    q = X.shape[1]
    psi_inv = np.linalg.inv(state.Psi)
    prec = psi_inv + X.T @ X
    chol = np.linalg.cholesky(prec)
    resid = state.Z - state.beta - state.eta @ state.Lambda.T  # n x P
    rhs = (psi_inv @ state.gamma)[:, None] + X.T @ resid  # q x P
    mean = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    state.B = (mean + np.linalg.solve(chol.T, rng.standard_normal((q, resid.shape[1])))).T


def niw_update(coefs: np.ndarray, prior: NIW, rng: np.random.Generator):
    """Draw (gamma, Psi) from the conjugate NIW posterior given P x q coefficient rows."""
    from scipy.stats import invwishart

    coefs = np.atleast_2d(coefs)
    m, q = coefs.shape
    g0 = np.asarray(prior.gamma0, dtype=float).reshape(q)
    Xi = np.atleast_2d(np.asarray(prior.Xi, dtype=float))
    iota_n = prior.iota + m
    d_n = prior.d + m
    bbar = coefs.mean(axis=0)
    gamma_n = (prior.iota * g0 + m * bbar) / iota_n
    dev = coefs - bbar
    S = dev.T @ dev
    off = (bbar - g0)[:, None]
    Xi_n = Xi + S + (prior.iota * m / iota_n) * (off @ off.T)
    Psi = np.atleast_2d(invwishart.rvs(df=d_n, scale=Xi_n, random_state=rng))
    gamma = rng.multivariate_normal(gamma_n, Psi / iota_n)
    return gamma, Psi, (gamma_n, iota_n, d_n, Xi_n)


def alpha_log_target(alpha, beta_tilde, P: int, tau: float, a: float, b: float) -> float:
    """log Ga(alpha; a, b) + sum_j log N(beta_tilde_j; mu_P(alpha), tau^2)."""
    if alpha <= 0:
        return -np.inf
    mu = calibrated_mu(alpha, P)
    return float(gamma_logpdf(alpha, a, b) - 0.5 * np.sum((beta_tilde - mu) ** 2) / tau**2)


def mh_update_alpha(alpha: float, beta_tilde, P: int, prior=(1.0, 1.0),
                    rng: np.random.Generator | None = None, step: LogRandomWalk | None = None,
                    adapt: bool = False, likelihood: bool = True) -> float:
    """One Metropolis step on log alpha against the calibrated intercept prior."""
    step = step or LogRandomWalk(0.25)
    tau = np.sqrt(2.0 * np.log(P))
    a, b = prior
    if likelihood:
        target = lambda x: alpha_log_target(x, beta_tilde, P, tau, a, b)  # noqa: E731
    else:
        target = lambda x: float(gamma_logpdf(x, a, b)) if x > 0 else -np.inf  # noqa: E731
    return step.step(alpha, target, rng, adapt=adapt)


def _alpha_shift_move(state, y_pos, X, hyper, rng, step, adapt):
    """Joint move of alpha and the scaled intercepts of all-zero columns.

    With ``delta = mu_P(alpha') - mu_P(alpha)`` the proposal shifts
    ``beta_tilde_j += delta`` on the all-zero columns J, which leaves their
    prior terms unchanged.  Their latents are integrated out given the factors,
    so the ratio carries ``prod_i Phi(-mean_ij)`` over J, and Z is redrawn on J
    afterwards.  The translation has unit Jacobian; J depends on the data only.
    """
    zero = ~y_pos.any(axis=0)
    if not zero.any():
        return
    P = y_pos.shape[1]
    tau = np.sqrt(2.0 * np.log(P))
    d = state.scale
    bt = state.beta / d
    mu0 = float(calibrated_mu(state.alpha, P))
    off = (_linear_offset(state, X) + state.eta @ state.Lambda.T)
    off = off[:, zero] if np.ndim(off) == 2 else np.zeros((y_pos.shape[0], zero.sum()))
    bt_rest, bt_zero, d_zero = bt[~zero], bt[zero], d[zero]

    def target(a):
        if a <= 0:
            return -np.inf
        mu = float(calibrated_mu(a, P))
        lp = float(gamma_logpdf(a, hyper.a_alpha, hyper.b_alpha))
        lp -= 0.5 * float(np.sum((bt_rest - mu) ** 2)) / tau**2
        m = d_zero * (bt_zero + (mu - mu0)) + off
        return lp + float(special.log_ndtr(-m).sum())

    new = step.step(state.alpha, target, rng, adapt=adapt)
    if new != state.alpha:
        shift = float(calibrated_mu(new, P)) - mu0
        beta = state.beta.copy()
        beta[zero] = d_zero * (bt_zero + shift)
        state.beta = beta
        state.alpha = new
        mean = beta[zero] + off
        Z = state.Z.copy()
        Z[:, zero] = sample_truncated_normal(mean, 1.0, False, rng)
        state.Z = Z


def _mvt_logpdf_iso(x: np.ndarray, df: float, scale: float) -> np.ndarray:
    # columns of x are points in R^P; isotropic scale matrix scale * I
    P = x.shape[0]
    ss = np.einsum("jk,jk->k", x, x)
    return (special.gammaln(0.5 * (df + P)) - special.gammaln(0.5 * df)
            - 0.5 * P * np.log(df * np.pi * scale) - 0.5 * (df + P) * np.log1p(ss / (df * scale)))


def _mvn_logpdf_iso(x: np.ndarray, var: float) -> np.ndarray:
    P = x.shape[0]
    ss = np.einsum("jk,jk->k", x, x)
    return -0.5 * P * np.log(2 * np.pi * var) - 0.5 * ss / var


def cusp_indicator_logprobs(Lambda: np.ndarray, omega: np.ndarray, cusp: CuspHyper) -> np.ndarray:
    """K x K matrix: row k holds log pr(S_k = l | -) up to a constant."""
    K = Lambda.shape[1]
    spike = _mvn_logpdf_iso(Lambda, cusp.theta_inf)
    slab = _mvt_logpdf_iso(Lambda, 2.0 * cusp.a_theta, cusp.b_theta / cusp.a_theta)
    l_idx = np.arange(1, K + 1)[None, :]
    k_idx = np.arange(1, K + 1)[:, None]
    with np.errstate(divide="ignore"):
        logw = np.log(omega)[None, :]
    return logw + np.where(l_idx <= k_idx, spike[:, None], slab[:, None])


def _update_cusp(state, cusp: CuspHyper, rng):
    K = state.K
    P = state.Lambda.shape[0]
    lp = cusp_indicator_logprobs(state.Lambda, state.omega, cusp)
    lp -= lp.max(axis=1, keepdims=True)
    prob = np.exp(lp)
    prob /= prob.sum(axis=1, keepdims=True)
    u = rng.random(K)[:, None]
    state.S = 1 + np.minimum((np.cumsum(prob, axis=1) < u).sum(axis=1), K - 1)
    counts = np.bincount(state.S, minlength=K + 2)[1:K + 1]
    greater = counts[::-1].cumsum()[::-1]  # #{S >= l}
    nu = np.ones(K)
    if K > 1:
        nu[:-1] = rng.beta(1.0 + counts[:-1], cusp.kappa + greater[1:])
    state.nu = nu
    theta = np.full(K, cusp.theta_inf)
    slab = state.active
    if np.any(slab):
        ss = np.einsum("jk,jk->k", state.Lambda, state.Lambda)[slab]
        shape = cusp.a_theta + 0.5 * P
        theta[slab] = (cusp.b_theta + 0.5 * ss) / rng.standard_gamma(shape, size=slab.sum())
    state.theta = theta


def _adapt_factors(state, k_max: int, cusp: CuspHyper, rng):
    active = state.active
    k_star = int(active.sum())
    P, n = state.Lambda.shape[0], state.eta.shape[0]
    if k_star < state.K - 1:
        w = state.omega[active]
        state.Lambda = np.hstack([state.Lambda[:, active],
                                  np.sqrt(cusp.theta_inf) * rng.standard_normal((P, 1))])
        state.eta = np.hstack([state.eta[:, active], rng.standard_normal((n, 1))])
        state.theta = np.append(state.theta[active], cusp.theta_inf)
        state.nu = _nu_from_weights(np.append(w, max(1.0 - w.sum(), 0.0)))
        state.S = np.append(state.S[active], k_star + 1)
    elif state.K < k_max:
        K = state.K
        nu = state.nu.copy()
        nu[-1] = rng.beta(1.0, cusp.kappa)
        state.nu = np.append(nu, 1.0)
        state.Lambda = np.hstack([state.Lambda, np.sqrt(cusp.theta_inf) * rng.standard_normal((P, 1))])
        state.eta = np.hstack([state.eta, rng.standard_normal((n, 1))])
        state.theta = np.append(state.theta, cusp.theta_inf)
        state.S = np.append(state.S, K + 1)


def _check_finite(state: FactorChainState, it: int):
    for name in ("Z", "eta", "Lambda", "beta"):
        if not np.all(np.isfinite(getattr(state, name))):
            err = NumericalFailure(f"non-finite {name} at iteration {it}")
            err.state = state
            raise err
    if not np.isfinite(state.alpha):
        err = NumericalFailure(f"non-finite alpha at iteration {it}")
        err.state = state
        raise err


def gibbs_cycle(state: FactorChainState, y, hyper: FactorHyper, rng: np.random.Generator,
                design: CovariateDesign | None = None, alpha_step: LogRandomWalk | None = None,
                adapt_alpha: bool = False, shift_step: LogRandomWalk | None = None) -> FactorChainState:
    """One full sweep; ``state`` is updated in place and returned."""
    y_pos = np.asarray(y, dtype=bool)
    P = y_pos.shape[1]
    X = design.X if design is not None else None
    tau = np.sqrt(2.0 * np.log(P))
    mu = float(calibrated_mu(state.alpha, P))

    _update_z(state, y_pos, X, rng)
    if hyper.beta_step == "collapsed":
        _update_beta_collapsed(state, X, mu, tau, rng)
        _update_eta(state, X, rng)
        _update_lambda(state, X, mu, tau, rng)
    else:
        _update_eta(state, X, rng)
        _update_lambda(state, X, mu, tau, rng)
        _update_beta_conditional(state, X, mu, tau, rng)
    if design is not None:
        _update_coefs(state, X, rng)
        if isinstance(design.prior, NIW):
            state.gamma, state.Psi, _ = niw_update(state.B, design.prior, rng)
    if not hyper.fix_alpha:
        state.alpha = mh_update_alpha(state.alpha, state.beta_tilde, P,
                                      (hyper.a_alpha, hyper.b_alpha), rng,
                                      alpha_step, adapt=adapt_alpha)
        if hyper.shift_move:
            _alpha_shift_move(state, y_pos, X, hyper, rng, shift_step or LogRandomWalk(0.25), adapt_alpha)
    _update_cusp(state, hyper.cusp, rng)
    return state


def init_state(y, hyper: FactorHyper, rng: np.random.Generator,
               design: CovariateDesign | None = None, alpha: float | None = None) -> FactorChainState:
    y = np.asarray(y)
    n, P = y.shape
    k_max = hyper.k_max or min(P, 30)
    K = hyper.k_init or min(k_max, 10)
    K = max(1, min(K, k_max))
    from .genprior import moment_alpha
    from .sampler_twostage import laplace_counts

    n_j = y.sum(axis=0)
    if alpha is None:
        alpha = max(moment_alpha(int(np.count_nonzero(n_j)), n, P), 0.05)
    # intercepts start at their identity-Sigma Laplace modes
    beta, _ = laplace_counts(n_j, n, float(calibrated_mu(alpha, P)), np.sqrt(2.0 * np.log(P)))
    Lambda = 0.1 * rng.standard_normal((P, K))
    eta = rng.standard_normal((n, K))
    nu = rng.beta(1.0, hyper.cusp.kappa, size=K)
    nu[-1] = 1.0
    state = FactorChainState(
        Z=np.zeros((n, P)), eta=eta, Lambda=Lambda, beta=beta,
        alpha=float(alpha),
        S=np.full(K, K), nu=nu, theta=np.ones(K))
    if design is not None:
        design.check_rows(n)
        state.B = np.zeros((P, design.q))
        state.gamma = np.array(design.gamma, dtype=float)
        state.Psi = np.array(design.Psi, dtype=float)
    X = design.X if design is not None else None
    _update_z(state, y.astype(bool), X, rng)
    return state


def fit_factor_mvpibp(Y, P: int, hyper: FactorHyper = FactorHyper(), mcmc: McmcConfig = McmcConfig(),
                      rng: np.random.Generator | None = None, design: CovariateDesign | None = None,
                      store_sigma_every: int = 0, alpha_init: float | None = None) -> FactorChainOutput:
    """Run burn-in plus sampling cycles and collect posterior summaries.

    Sigma draws are summarised by running first and second moments; set
    ``store_sigma_every`` to also keep every k-th stored draw in full.
    """
    if not isinstance(Y, FeatureMatrix):
        Y = FeatureMatrix(Y)
    rng = np.random.default_rng(mcmc.seed) if rng is None else rng
    y = Y.padded(P).entries
    k_max = hyper.k_max or min(P, 30)
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    state = init_state(y, hyper, rng, design, alpha=alpha_init)
    step = LogRandomWalk(hyper.alpha_sd)
    shift = LogRandomWalk(hyper.alpha_sd)

    B = mcmc.n_kept
    bt = np.empty((B, P))
    alphas = np.empty(B)
    kstar = np.empty(B, dtype=np.int64)
    s1 = np.zeros((P, P))
    s2 = np.zeros((P, P))
    sig_store: list[np.ndarray] = []
    coef_draws = np.empty((B, P, design.q)) if design is not None else None
    gamma_draws = np.empty((B, design.q)) if design is not None else None
    kept = 0
    for it in range(mcmc.iterations):
        gibbs_cycle(state, y, hyper, rng, design, alpha_step=step, adapt_alpha=it < mcmc.burn_in,
                    shift_step=shift)
        if hyper.adapt and it >= hyper.adapt_start:
            if rng.random() < np.exp(hyper.adapt_a0 + hyper.adapt_a1 * it):
                _adapt_factors(state, k_max, hyper.cusp, rng)
        _check_finite(state, it)
        if mcmc.keep(it):
            bt[kept] = state.beta_tilde
            alphas[kept] = state.alpha
            kstar[kept] = state.k_active
            sig = state.sigma()
            s1 += sig
            s2 += sig * sig
            if store_sigma_every and kept % store_sigma_every == 0:
                sig_store.append(sig)
            if design is not None:
                coef_draws[kept] = state.B
                gamma_draws[kept] = state.gamma
            kept += 1
    config = dict(iterations=mcmc.iterations, burn_in=mcmc.burn_in, thin=mcmc.thin, seed=mcmc.seed,
                  P=P, k_max=k_max, beta_step=hyper.beta_step, alpha_acceptance=step.acceptance,
                  shift_acceptance=shift.acceptance)
    log.debug("factor fit done: alpha acceptance %.2f, final K=%d", step.acceptance, state.K)
    return FactorChainOutput(bt, alphas, kstar, s1 / B, s2 / B, sig_store, coef_draws, gamma_draws,
                             config, final_state=state)
