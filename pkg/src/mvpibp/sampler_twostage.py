"""Two-stage approximate conditional inference.

Stage one replaces Sigma by the identity and summarises each intercept by a
Laplace approximation N(beta_hat_j, Q_j) of its marginal posterior.  Stage two
fits a bivariate probit to every pair of columns, holding the intercepts at
their pseudo-posteriors, and reports the posterior mean and variance of the
pair correlation from a quadrature grid on the Fisher-z scale.

Both stages depend on the data only through column counts (and pair co-counts)
when there are no covariates, so fits are shared across columns with equal
counts and pairs with equal count triples.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .mcmc import LogRandomWalk, McmcConfig, NumericalFailure, gamma_logpdf
from .model import NIW, CovariateDesign, FeatureMatrix, IndependentNormal, calibrated_mu, fisher_z
from .genprior import moment_alpha
from .numkit import bivariate_normal_cdf, gauss_legendre, sample_truncated_interval
from .sampler_factor import mh_update_alpha, niw_update

__all__ = [
    "LaplaceMarginal",
    "PairPosterior",
    "TwoStageOutput",
    "laplace_beta",
    "laplace_counts",
    "pair_sigma_posterior",
    "pair_posteriors_from_counts",
    "omega2_update",
    "run_hierarchical",
    "run_common_rho",
    "run_covariate",
    "run_flat_ablation",
    "InterceptMarginal",
    "alpha_marginal_log_target",
]

log = logging.getLogger(__name__)

SIGMA_EDGE = 1.0 - 1e-6
ZETA_CAP = 8.0
GRID_ORDER = 40
_GRID = gauss_legendre(GRID_ORDER)


@dataclass(frozen=True)
class LaplaceMarginal:
    beta_hat: float | np.ndarray
    Q: float | np.ndarray

    def __post_init__(self):
        q = np.atleast_2d(self.Q)
        if not np.all(np.linalg.eigvalsh(q) > 0):
            raise ValueError("Laplace curvature must be positive definite")


@dataclass(frozen=True)
class PairPosterior:
    sigma_hat: float
    s2: float

    def __post_init__(self):
        if not abs(self.sigma_hat) < 1 or not self.s2 > 0:
            raise ValueError(f"invalid pair posterior ({self.sigma_hat}, {self.s2})")


@dataclass
class TwoStageOutput:
    alpha_draws: np.ndarray
    beta_draws: np.ndarray
    sigma_mean: np.ndarray | None = None
    sigma_sq_mean: np.ndarray | None = None
    omega2_draws: np.ndarray | None = None
    rho_draws: np.ndarray | None = None
    sigma_draws: np.ndarray | None = None  # kept x P(P-1)/2, upper-triangle order
    coef_draws: np.ndarray | None = None
    gamma_draws: np.ndarray | None = None
    Psi_draws: np.ndarray | None = None
    config: dict = field(default_factory=dict)

    @property
    def pi_draws(self) -> np.ndarray:
        return special.ndtr(self.beta_draws)

    @property
    def pi_mean(self) -> np.ndarray:
        return self.pi_draws.mean(axis=0)

    @property
    def sigma_hat(self) -> np.ndarray:
        if self.rho_draws is not None:
            P = self.beta_draws.shape[1]
            r = float(self.rho_draws.mean())
            return np.full((P, P), r) + (1 - r) * np.eye(P)
        return self.sigma_mean


# -- stage one ----------------------------------------------------------------------

def _mills(x):
    # phi(x) / Phi(x), stable in both tails
    return np.exp(-0.5 * x * x - 0.5 * np.log(2 * np.pi) - special.log_ndtr(x))


def _count_logpost(b, n1, n0, mu, tau):
    return n1 * special.log_ndtr(b) + n0 * special.log_ndtr(-b) - 0.5 * ((b - mu) / tau) ** 2


def laplace_counts(n1, n: int, mu, tau, tol: float = 1e-8, max_iter: int = 100):
    """Vectorised Newton fit of the probit intercept posterior from counts.

    Returns ``(beta_hat, Q)`` arrays shaped like ``n1``.
    """
    n1 = np.asarray(n1, dtype=float)
    n0 = n - n1
    mu = np.broadcast_to(np.asarray(mu, dtype=float), n1.shape)
    if np.any(np.asarray(tau) <= 0):
        raise ValueError("tau must be positive")
    b = special.ndtri((n1 + 0.5) / (n + 1.0))
    b = np.where(n > 0, b, mu)

    def grad_hess(b):
        r1, r0 = _mills(b), _mills(-b)
        g = n1 * r1 - n0 * r0 - (b - mu) / tau**2
        h = -n1 * r1 * (b + r1) - n0 * r0 * (r0 - b) - 1.0 / tau**2
        return g, h

    for _ in range(max_iter):
        g, h = grad_hess(b)
        if np.all(np.abs(g) < tol):
            break
        step = np.where(np.abs(g) < tol, 0.0, -g / h)
        f0 = _count_logpost(b, n1, n0, mu, tau)
        for _ in range(40):
            b_new = b + step
            worse = _count_logpost(b_new, n1, n0, mu, tau) < f0 - 1e-12 * np.abs(f0)
            if not worse.any():
                break
            step = np.where(worse, 0.5 * step, step)
        b = b_new
    else:
        raise NumericalFailure("Laplace Newton iterations did not converge")
    return b, -1.0 / h


def _logpost_cov(B, X1, y, m0, prec0):
    eta = X1 @ B.T  # n x P
    ll = np.where(y, special.log_ndtr(eta), special.log_ndtr(-eta)).sum(axis=0)
    d = B - m0
    return ll - 0.5 * np.einsum("pi,ij,pj->p", d, prec0, d)


def _laplace_design(y, X1, m0, V0, tol=1e-8, max_iter=100):
    """Newton fits for every column of ``y`` against design ``X1`` (n x m),
    prior N(m0, V0).  Returns (B_hat P x m, Q P x m x m)."""
    y = np.asarray(y, dtype=bool)
    n, P = y.shape
    m = X1.shape[1]
    prec0 = np.linalg.inv(V0)
    B = np.tile(m0, (P, 1)).astype(float)
    B[:, 0] = special.ndtri((y.sum(axis=0) + 0.5) / (n + 1.0))
    for _ in range(max_iter):
        eta = X1 @ B.T
        r1, r0 = _mills(eta), _mills(-eta)
        s = np.where(y, r1, -r0)
        w = np.where(y, r1 * (eta + r1), r0 * (r0 - eta))
        G = (X1.T @ s).T - (B - m0) @ prec0
        if np.max(np.abs(G)) < tol:
            break
        H = -np.einsum("ni,nj,np->pij", X1, X1, w) - prec0
        step = -np.linalg.solve(H, G[..., None])[..., 0]
        f0 = _logpost_cov(B, X1, y, m0, prec0)
        for _ in range(40):
            B_new = B + step
            worse = _logpost_cov(B_new, X1, y, m0, prec0) < f0 - 1e-12 * np.abs(f0)
            if not worse.any():
                break
            step[worse] *= 0.5
        B = B_new
    else:
        raise NumericalFailure("Laplace Newton iterations did not converge")
    eta = X1 @ B.T
    r1, r0 = _mills(eta), _mills(-eta)
    w = np.where(y, r1 * (eta + r1), r0 * (r0 - eta))
    H = -np.einsum("ni,nj,np->pij", X1, X1, w) - prec0
    return B, np.linalg.inv(-H)


def laplace_beta(y_col, prior, X=None) -> LaplaceMarginal:
    """Laplace approximation to the probit intercept (or coefficient) posterior.

    ``prior`` is ``(mu, tau)`` without covariates.  With an n x q matrix ``X``
    it is ``(m0, V0)`` for the (1 + q)-vector of intercept and slopes and the
    intercept is the first coordinate.
    """
    y = np.asarray(y_col).astype(bool).ravel()
    if X is None:
        mu, tau = prior
        if tau <= 0:
            raise ValueError("tau must be positive")
        b, q = laplace_counts(np.array([y.sum()]), y.size, mu, tau)
        return LaplaceMarginal(float(b[0]), float(q[0]))
    X = np.asarray(X, dtype=float).reshape(y.size, -1)
    X1 = np.column_stack([np.ones(y.size), X])
    m0, V0 = prior
    B, Q = _laplace_design(y[:, None], X1, np.asarray(m0, dtype=float), np.atleast_2d(V0))
    return LaplaceMarginal(B[0], Q[0])


class InterceptMarginal:
    """Column log-likelihoods tabulated on intercept grids.

    Integrating the intercepts out of the Sigma-free working likelihood gives
    ``log p(y | alpha)`` for any calibrated prior N(mu, tau^2) at the cost of a
    prior evaluation on the stored grids.  Grids are centred on Laplace fits
    and span +-``width`` Laplace standard deviations (trapezoid rule).
    """

    def __init__(self, centers, scales, loglik_fn, weights=None, nodes: int = 401, width: float = 12.0):
        centers = np.asarray(centers, dtype=float)
        scales = np.asarray(scales, dtype=float)
        t = np.linspace(-1.0, 1.0, nodes)
        self.grid = centers[:, None] + width * scales[:, None] * t
        self.log_dx = np.log(2.0 * width * scales / (nodes - 1))
        self.loglik = loglik_fn(self.grid)
        self.weights = np.ones(centers.size) if weights is None else np.asarray(weights, dtype=float)

    def log_marginal(self, mu: float, tau: float) -> float:
        lp = self.loglik - 0.5 * ((self.grid - mu) / tau) ** 2 - np.log(tau * np.sqrt(2 * np.pi))
        return float(np.dot(self.weights, special.logsumexp(lp, axis=1) + self.log_dx))

    @classmethod
    def from_counts(cls, n_j, n: int, mu: float, tau: float, **kw) -> "InterceptMarginal":
        vals, mult = np.unique(np.asarray(n_j), return_counts=True)
        bh, Q = laplace_counts(vals, n, mu, tau)
        v = vals[:, None].astype(float)
        return cls(bh, np.sqrt(Q), lambda g: v * special.log_ndtr(g) + (n - v) * special.log_ndtr(-g),
                   weights=mult, **kw)

    @classmethod
    def from_offsets(cls, y, offset, centers, scales, chunk: int = 32, **kw) -> "InterceptMarginal":
        """Columns of ``y`` with observation-specific offsets (n x P) added to the intercept."""
        sign = np.where(np.asarray(y, dtype=bool), 1.0, -1.0)

        def loglik(grid):
            out = np.empty_like(grid)
            for s in range(0, grid.shape[0], chunk):
                sl = slice(s, s + chunk)
                m = grid[sl][None, :, :] + offset[:, sl, None]  # n x c x G
                out[sl] = special.log_ndtr(sign[:, sl, None] * m).sum(axis=0)
            return out

        return cls(centers, scales, loglik, **kw)


def alpha_marginal_log_target(alpha: float, im: InterceptMarginal, P: int, a: float, b: float) -> float:
    """log Ga(alpha; a, b) + log p(y | alpha) with intercepts integrated out."""
    if alpha <= 0:
        return -np.inf
    mu = float(calibrated_mu(alpha, P))
    return float(gamma_logpdf(alpha, a, b)) + im.log_marginal(mu, float(np.sqrt(2.0 * np.log(P))))


# -- stage two ------------------------------------------------------------------

def _pair_loglik(b1, b2, counts, rho):
    """Bivariate-probit log-likelihood from 2x2 tables; b1, b2, counts broadcast
    against the grid ``rho`` (... x G)."""
    n11, n10, n01, n00 = counts
    p11 = bivariate_normal_cdf(b1, b2, rho)
    p00 = bivariate_normal_cdf(-b1, -b2, rho)
    tiny = np.finfo(float).tiny
    p10 = np.maximum(special.ndtr(b1) - p11, tiny)
    p01 = np.maximum(special.ndtr(b2) - p11, tiny)
    out = np.zeros(np.broadcast(b1, rho).shape)
    for c, p in ((n11, p11), (n10, p10), (n01, p01), (n00, p00)):
        out = out + np.where(c > 0, c * np.log(np.maximum(p, tiny)), 0.0)
    return out


def _hermite3(b, Q):
    # three-point Gauss-Hermite rule for N(b, Q)
    h = np.sqrt(3.0 * Q)
    return (b - h, b, b + h), (1 / 6, 2 / 3, 1 / 6)


def _grid_pass(b1, b2, Q1, Q2, counts, lo, hi, omega, integrate_beta):
    x, w = _GRID.nodes, _GRID.weights
    half = 0.5 * (hi - lo)[:, None]
    zeta = 0.5 * (hi + lo)[:, None] + half * x
    rho = np.tanh(zeta)
    cnt = tuple(c[:, None] for c in counts)
    if integrate_beta:
        (n1s, w1s), (n2s, w2s) = _hermite3(b1, Q1), _hermite3(b2, Q2)
        terms = []
        for u, wu in zip(n1s, w1s):
            for v, wv in zip(n2s, w2s):
                terms.append(np.log(wu * wv) + _pair_loglik(u[:, None], v[:, None], cnt, rho))
        ll = special.logsumexp(np.stack(terms), axis=0)
    else:
        ll = _pair_loglik(b1[:, None], b2[:, None], cnt, rho)
    lp = ll - 0.5 * (zeta / omega) ** 2 + np.log(w * half)
    lp -= lp.max(axis=1, keepdims=True)
    post = np.exp(lp)
    post /= post.sum(axis=1, keepdims=True)
    return zeta, rho, post


def _moments(values, post):
    m = (values * post).sum(axis=1)
    v = (((values - m[:, None]) ** 2) * post).sum(axis=1)
    return m, v


def pair_posteriors_from_counts(b1, b2, counts, omega: float, Q1=None, Q2=None,
                                integrate_beta: bool = False, chunk: int = 1024):
    """Pair-correlation posterior mean and variance for many 2x2 tables.

    ``counts`` is ``(n11, n10, n01, n00)``; returns ``(sigma_hat, s2)`` arrays.
    Already-computed rows do not depend on ``chunk``.
    """
    if omega <= 0:
        raise ValueError("omega must be positive")
    b1 = np.atleast_1d(np.asarray(b1, dtype=float))
    b2 = np.atleast_1d(np.asarray(b2, dtype=float))
    counts = tuple(np.broadcast_to(np.asarray(c, dtype=float), b1.shape) for c in counts)
    if integrate_beta:
        Q1 = np.broadcast_to(np.asarray(Q1, dtype=float), b1.shape)
        Q2 = np.broadcast_to(np.asarray(Q2, dtype=float), b1.shape)
    else:
        Q1 = Q2 = np.zeros_like(b1)
    U = b1.size
    sig = np.empty(U)
    s2 = np.empty(U)
    L = min(6.0 * omega, ZETA_CAP)
    for s in range(0, U, chunk):
        sl = slice(s, s + chunk)
        k = b1[sl].size
        args = (b1[sl], b2[sl], Q1[sl], Q2[sl], tuple(c[sl] for c in counts))
        # the first pass shares one grid across rows
        lo, hi = np.array([-L]), np.array([L])
        zeta, rho, post = _grid_pass(*args, lo, hi, omega, integrate_beta)
        m, v = _moments(zeta, post)
        # refine around the bulk; the first-pass spacing bounds the width below
        spread = 8.0 * np.maximum(np.sqrt(v), (hi - lo) / GRID_ORDER)
        # rows are refined independently so results do not depend on the chunking
        todo = np.arange(k)
        out_s, out_v = np.empty(k), np.empty(k)
        for attempt in range(3):
            sub = tuple(a[todo] for a in args[:4]) + (tuple(c[todo] for c in args[4]),)
            lo = np.maximum(m[todo] - spread[todo], -ZETA_CAP)
            hi = np.minimum(m[todo] + spread[todo], ZETA_CAP)
            zeta, rho, post = _grid_pass(*sub, lo, hi, omega, integrate_beta)
            out_s[todo], out_v[todo] = _moments(rho, post)
            edge = np.maximum(post[:, 0], post[:, -1]) > 1e-10 * post.max(axis=1)
            edge &= (lo > -ZETA_CAP) & (hi < ZETA_CAP)
            if not edge.any() or attempt == 2:
                break
            m[todo], v[todo] = _moments(zeta, post)
            spread[todo] = np.where(edge, 2.0 * spread[todo], spread[todo])
            todo = todo[edge]
        sig[sl], s2[sl] = out_s, out_v
    s2 = np.maximum(s2, np.finfo(float).tiny)
    return sig, s2


def pair_sigma_posterior(y_j, y_jp, beta_pseudo, omega: float, integrate_beta: bool = False) -> PairPosterior:
    """Posterior of the correlation of one pair, intercepts held at their
    Laplace pseudo-posteriors ``beta_pseudo = (LaplaceMarginal, LaplaceMarginal)``."""
    a = np.asarray(y_j).astype(bool)
    b = np.asarray(y_jp).astype(bool)
    if a.shape != b.shape:
        raise ValueError("pair columns must have the same length")
    n11 = np.sum(a & b)
    n10 = np.sum(a & ~b)
    n01 = np.sum(~a & b)
    n00 = a.size - n11 - n10 - n01
    m1, m2 = beta_pseudo
    s, v = pair_posteriors_from_counts([m1.beta_hat], [m2.beta_hat], (n11, n10, n01, n00), omega,
                                       [m1.Q], [m2.Q], integrate_beta=integrate_beta)
    return PairPosterior(float(s[0]), float(v[0]))


def omega2_update(zeta, P: int, a_omega: float, b_omega: float, rng) -> float:
    """Inverse-gamma draw with shape P(P-1)/2 + a_omega and scale 0.5 sum zeta^2 + b_omega."""
    shape = 0.5 * P * (P - 1) + a_omega
    scale = 0.5 * float(np.sum(np.square(zeta))) + b_omega
    return scale / rng.standard_gamma(shape)


# -- drivers --------------------------------------------------------------------

class _PairTables:
    """Unique 2x2 co-occurrence tables of the upper-triangle pairs."""

    def __init__(self, y: np.ndarray):
        y = y.astype(np.int64)
        n, P = y.shape
        n_j = y.sum(axis=0)
        co = y.T @ y
        iu, ju = np.triu_indices(P, 1)
        a, b, c = n_j[iu], n_j[ju], co[iu, ju]
        swap = a > b  # orient so the rarer column comes first
        lo, hi = np.where(swap, b, a), np.where(swap, a, b)
        keys = np.stack([lo, hi, c], axis=1)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        self.n, self.P, self.n_j = n, P, n_j
        self.iu, self.ju = iu, ju
        self.swap = swap
        self.uniq, self.inverse = uniq, inv.ravel()
        u1, u2, u11 = uniq.T
        self.counts = (u11, u1 - u11, u2 - u11, n - u1 - u2 + u11)
        self.full_counts = (c, a - c, b - c, n - a - b + c)

    def posteriors(self, beta_hat_of_count, Q_of_count, omega, integrate_beta=False):
        u1, u2 = self.uniq[:, 0], self.uniq[:, 1]
        s, v = pair_posteriors_from_counts(beta_hat_of_count[u1], beta_hat_of_count[u2], self.counts,
                                           omega, Q_of_count[u1], Q_of_count[u2], integrate_beta)
        return s[self.inverse], v[self.inverse]


def _calibrated_prior(alpha, P, flat):
    if flat:
        return 0.0, 10.0
    return float(calibrated_mu(alpha, P)), float(np.sqrt(2.0 * np.log(P)))


def _stage_one(n_j, n, alpha, P, flat, rng):
    """Laplace fits for every possible count, then beta draws per column."""
    mu, tau = _calibrated_prior(alpha, P, flat)
    grid = np.arange(n + 1)
    bh, Q = laplace_counts(grid, n, mu, tau)
    beta = bh[n_j] + np.sqrt(Q[n_j]) * rng.standard_normal(n_j.size)
    return bh, Q, beta


def _alpha_step(alpha, beta, P, prior, rng, step, adapt, target="marginal", im_factory=None):
    """MH update of alpha, either against p(y | alpha) with the intercepts
    integrated out (``"marginal"``) or given the drawn intercepts (``"conditional"``)."""
    if target == "conditional":
        return mh_update_alpha(alpha, beta, P, prior, rng, step, adapt=adapt)
    im = im_factory(alpha)
    a, b = prior
    return step.step(alpha, lambda x: alpha_marginal_log_target(x, im, P, a, b), rng, adapt=adapt)


def _initial_alpha(alpha_init, n_j, n, P):
    if alpha_init is not None:
        return float(alpha_init)
    return max(moment_alpha(int(np.count_nonzero(n_j)), n, P), 0.05)


def _check_alpha_target(target):
    if target not in ("marginal", "conditional"):
        raise ValueError(f"unknown alpha_target {target!r}")


def _prepare(Y, P):
    if not isinstance(Y, FeatureMatrix):
        Y = FeatureMatrix(Y)
    if P < Y.p:
        raise ValueError(f"P={P} is below the observed p={Y.p}")
    return Y.padded(P).entries


def _default_mcmc(T):
    return McmcConfig(iterations=T, burn_in=T // 4)


def _draw_sigma(sig, s2, rng):
    return sample_truncated_interval(sig, np.sqrt(s2), -SIGMA_EDGE, SIGMA_EDGE, rng)


def run_hierarchical(Y, P: int, priors=(1.0, 1.0, 1.0, 1.0), T: int = 200, rng=None,
                     mcmc: McmcConfig | None = None, alpha_init: float | None = None,
                     omega2_init: float = 0.25, integrate_beta: bool = False,
                     store_sigma_draws: bool = False, flat: bool = False,
                     alpha_target: str = "marginal") -> TwoStageOutput:
    """Two-stage sampler with zeta_jj' ~ N(0, omega^2) and omega^2 inverse-gamma.

    ``priors = (a_alpha, b_alpha, a_omega, b_omega)``.  By default the first
    quarter of the ``T`` outer cycles is discarded.  ``flat`` replaces the
    calibrated intercept prior by N(0, 10^2) and freezes alpha.

    ``alpha_target="marginal"`` updates alpha against p(y | alpha) with the
    intercepts integrated out of the identity-Sigma likelihood;
    ``"conditional"`` conditions on the drawn intercepts instead.
    """
    _check_alpha_target(alpha_target)
    mcmc = mcmc or _default_mcmc(T)
    rng = np.random.default_rng(mcmc.seed) if rng is None else rng
    y = _prepare(Y, P)
    n = y.shape[0]
    a_alpha, b_alpha, a_omega, b_omega = priors
    tables = _PairTables(y)
    npair = tables.iu.size
    alpha = _initial_alpha(alpha_init, tables.n_j, n, P)
    omega2 = float(omega2_init)
    step = LogRandomWalk(0.25)
    tau = float(np.sqrt(2.0 * np.log(P)))
    im_factory = lambda a: InterceptMarginal.from_counts(  # noqa: E731
        tables.n_j, n, float(calibrated_mu(a, P)), tau)

    B = mcmc.n_kept
    alphas, omegas = np.empty(B), np.empty(B)
    betas = np.empty((B, P))
    s1 = np.zeros(npair)
    s2m = np.zeros(npair)
    draws = np.empty((B, npair), dtype=np.float32) if store_sigma_draws else None
    kept = 0
    for it in range(mcmc.iterations):
        bh, Q, beta = _stage_one(tables.n_j, n, alpha, P, flat, rng)
        if not flat:
            alpha = _alpha_step(alpha, beta, P, (a_alpha, b_alpha), rng, step, it < mcmc.burn_in,
                                alpha_target, im_factory)
        sig, v = tables.posteriors(bh, Q, np.sqrt(omega2), integrate_beta)
        sigma = _draw_sigma(sig, v, rng)
        omega2 = omega2_update(fisher_z(sigma), P, a_omega, b_omega, rng)
        if not (np.isfinite(alpha) and np.isfinite(omega2)):
            raise NumericalFailure(f"non-finite hyperparameter at cycle {it}")
        if mcmc.keep(it):
            alphas[kept], omegas[kept] = alpha, omega2
            betas[kept] = beta
            s1 += sigma
            s2m += sigma * sigma
            if draws is not None:
                draws[kept] = sigma
            kept += 1
    smean = _to_matrix(s1 / B, tables, P)
    ssq = _to_matrix(s2m / B, tables, P)
    config = dict(method="flat-ablation" if flat else "twostage-hier", P=P, T=mcmc.iterations,
                  burn_in=mcmc.burn_in, seed=mcmc.seed, integrate_beta=integrate_beta,
                  unique_pair_tables=int(tables.uniq.shape[0]), alpha_acceptance=step.acceptance,
                  alpha_target=alpha_target)
    return TwoStageOutput(alphas, betas, smean, ssq, omega2_draws=omegas, sigma_draws=draws, config=config)


def run_flat_ablation(Y, P: int, priors=(1.0, 1.0, 1.0, 1.0), T: int = 200, rng=None, **kw) -> TwoStageOutput:
    """Same machinery as :func:`run_hierarchical` with a flat intercept prior
    and no alpha (the bigMVP-style competitor)."""
    return run_hierarchical(Y, P, priors, T, rng, flat=True, **kw)


def _to_matrix(vals, tables, P):
    out = np.eye(P)
    out[tables.iu, tables.ju] = vals
    out[tables.ju, tables.iu] = vals
    return out


def common_rho_log_target(zeta, beta, tables: _PairTables, w0: float) -> float:
    """N(0, w0^2) prior on zeta times the pairwise composite likelihood."""
    rho = np.tanh(zeta)
    P = tables.P
    if P > 1 and rho <= -1.0 / (P - 1):
        return -np.inf
    b1, b2 = beta[tables.iu], beta[tables.ju]
    ll = _pair_loglik(b1, b2, tables.full_counts, rho)
    return float(ll.sum() - 0.5 * (zeta / w0) ** 2)


def run_common_rho(Y, P: int, priors=(1.0, 1.0, 1.0), T: int = 200, rng=None,
                   mcmc: McmcConfig | None = None, alpha_init: float | None = None,
                   zeta_sd: float = 0.02, alpha_target: str = "marginal") -> TwoStageOutput:
    """Stage one as in :func:`run_hierarchical`, then random-walk Metropolis on
    zeta = arctanh(rho) given the drawn intercepts.  ``priors = (a_alpha, b_alpha, w0)``."""
    mcmc = mcmc or _default_mcmc(T)
    rng = np.random.default_rng(mcmc.seed) if rng is None else rng
    y = _prepare(Y, P)
    n = y.shape[0]
    a_alpha, b_alpha, w0 = priors
    if w0 <= 0:
        raise ValueError("w0 must be positive")
    _check_alpha_target(alpha_target)
    tables = _PairTables(y)
    alpha = _initial_alpha(alpha_init, tables.n_j, n, P)
    tau = float(np.sqrt(2.0 * np.log(P)))
    im_factory = lambda a: InterceptMarginal.from_counts(  # noqa: E731
        tables.n_j, n, float(calibrated_mu(a, P)), tau)
    zeta = 0.0
    step = LogRandomWalk(0.25)
    zsd = min(zeta_sd, w0)
    acc = n_win = 0
    B = mcmc.n_kept
    alphas, rhos, betas = np.empty(B), np.empty(B), np.empty((B, P))
    kept = 0
    for it in range(mcmc.iterations):
        _, _, beta = _stage_one(tables.n_j, n, alpha, P, False, rng)
        alpha = _alpha_step(alpha, beta, P, (a_alpha, b_alpha), rng, step, it < mcmc.burn_in,
                            alpha_target, im_factory)
        cur = common_rho_log_target(zeta, beta, tables, w0)
        prop = zeta + zsd * rng.standard_normal()
        if abs(prop) < ZETA_CAP:
            lp = common_rho_log_target(prop, beta, tables, w0)
            if np.log(rng.random()) < lp - cur:
                zeta = prop
                acc += 1
        n_win += 1
        if it < mcmc.burn_in and n_win == 25:
            rate = acc / n_win
            zsd *= 0.8 if rate < 0.25 else (1.25 if rate > 0.5 else 1.0)
            acc = n_win = 0
        if mcmc.keep(it):
            alphas[kept], rhos[kept] = alpha, np.tanh(zeta)
            betas[kept] = beta
            kept += 1
    config = dict(method="twostage-common", P=P, T=mcmc.iterations, burn_in=mcmc.burn_in,
                  seed=mcmc.seed, w0=w0, zeta_sd=zsd, alpha_acceptance=step.acceptance)
    return TwoStageOutput(alphas, betas, rho_draws=rhos, config=config)


def run_covariate(Y, X, P: int, design: CovariateDesign | None = None, priors=(1.0, 1.0, 1.0, 1.0),
                  T: int = 200, rng=None, mcmc: McmcConfig | None = None,
                  alpha_init: float | None = None, omega2_init: float = 0.25,
                  pair_stage: str = "final", pair_every: int = 10, pair_rounds: int = 5,
                  alpha_target: str = "marginal") -> TwoStageOutput:
    """Two-stage sampler with covariate effects b_j ~ N(gamma, Psi).

    The intercept is the first coordinate of each coefficient vector and keeps
    the calibrated N(mu_P, tau_P^2) prior.  ``(gamma, Psi)`` follow an NIW
    prior (updated each cycle) or stay fixed for an independent-normal prior.

    The pair stage, which cannot share work across observations here, runs
    ``"every"`` ``pair_every`` cycles, once at the ``"final"`` posterior-mean
    coefficients (alternating with omega^2 updates ``pair_rounds`` times), or
    ``"none"``.
    """
    if pair_stage not in ("final", "every", "none"):
        raise ValueError(f"unknown pair_stage {pair_stage!r}")
    _check_alpha_target(alpha_target)
    mcmc = mcmc or _default_mcmc(T)
    rng = np.random.default_rng(mcmc.seed) if rng is None else rng
    y = _prepare(Y, P).astype(bool)
    n = y.shape[0]
    if design is None:
        design = CovariateDesign(np.asarray(X, dtype=float).reshape(n, -1), IndependentNormal())
    design.check_rows(n)
    X = design.X
    q = design.q
    X1 = np.column_stack([np.ones(n), X])
    a_alpha, b_alpha, a_omega, b_omega = priors
    alpha = _initial_alpha(alpha_init, y.sum(axis=0), n, P)
    gamma = np.array(design.gamma, dtype=float).reshape(q)
    Psi = np.atleast_2d(np.array(design.Psi, dtype=float))
    niw = isinstance(design.prior, NIW)
    step = LogRandomWalk(0.25)
    omega2 = float(omega2_init)
    tau = float(np.sqrt(2.0 * np.log(P)))

    Bk = mcmc.n_kept
    alphas, betas = np.empty(Bk), np.empty((Bk, P))
    coefs = np.empty((Bk, P, q))
    gammas = np.empty((Bk, q))
    Psis = np.empty((Bk, q, q))
    omegas = []
    s1 = np.zeros((P, P))
    s2m = np.zeros((P, P))
    n_pair = 0
    kept = 0
    bhat = None
    for it in range(mcmc.iterations):
        mu = float(calibrated_mu(alpha, P))
        m0 = np.concatenate([[mu], gamma])
        V0 = np.zeros((q + 1, q + 1))
        V0[0, 0] = tau**2
        V0[1:, 1:] = Psi
        bhat, Qhat = _laplace_design(y, X1, m0, V0)
        chol = np.linalg.cholesky(Qhat)
        draw = bhat + np.einsum("pij,pj->pi", chol, rng.standard_normal((P, q + 1)))
        offset = X @ draw[:, 1:].T
        im_factory = lambda a: InterceptMarginal.from_offsets(  # noqa: E731
            y, offset, bhat[:, 0], np.sqrt(Qhat[:, 0, 0]))
        alpha = _alpha_step(alpha, draw[:, 0], P, (a_alpha, b_alpha), rng, step, it < mcmc.burn_in,
                            alpha_target, im_factory)
        if niw:
            gamma, Psi, _ = niw_update(draw[:, 1:], design.prior, rng)
        if pair_stage == "every" and mcmc.keep(it) and kept % pair_every == 0:
            sig = _covariate_pair_stage(y, X1, bhat, np.sqrt(omega2))
            sigma = _draw_sigma(sig[0], sig[1], rng)
            omega2 = omega2_update(fisher_z(sigma), P, a_omega, b_omega, rng)
            omegas.append(omega2)
            iu = np.triu_indices(P, 1)
            s1[iu] += sigma
            s2m[iu] += sigma * sigma
            n_pair += 1
        if mcmc.keep(it):
            alphas[kept] = alpha
            betas[kept] = draw[:, 0]
            coefs[kept] = draw[:, 1:]
            gammas[kept], Psis[kept] = gamma, Psi
            kept += 1
    sigma_mean = sigma_sq = None
    if pair_stage == "final":
        bbar = np.column_stack([betas.mean(axis=0), coefs.mean(axis=0)])
        iu = np.triu_indices(P, 1)
        for _ in range(pair_rounds):
            sig = _covariate_pair_stage(y, X1, bbar, np.sqrt(omega2))
            sigma = _draw_sigma(sig[0], sig[1], rng)
            omega2 = omega2_update(fisher_z(sigma), P, a_omega, b_omega, rng)
            omegas.append(omega2)
        s1[iu], s2m[iu] = sig[0], sig[1] + sig[0] ** 2
        n_pair = 1
    if pair_stage != "none":
        s1 /= n_pair
        s2m /= n_pair
        sigma_mean = s1 + s1.T + np.eye(P)
        sigma_sq = s2m + s2m.T + np.eye(P)
    config = dict(method="twostage-covariate", P=P, q=q, T=mcmc.iterations, burn_in=mcmc.burn_in,
                  seed=mcmc.seed, pair_stage=pair_stage, niw=niw, alpha_acceptance=step.acceptance)
    return TwoStageOutput(alphas, betas, sigma_mean, sigma_sq,
                          omega2_draws=np.asarray(omegas) if omegas else None,
                          coef_draws=coefs, gamma_draws=gammas, Psi_draws=Psis, config=config)


def _covariate_pair_stage(y, X1, Bhat, omega, chunk=64):
    """Pair posteriors with observation-specific means x_i' b_j (plug-in)."""
    n, P = y.shape
    # unique design rows carry identical means; group them
    rows, inv = np.unique(X1, axis=0, return_inverse=True)
    inv = inv.ravel()
    eta = rows @ Bhat.T  # R x P
    R = rows.shape[0]
    onehot = np.zeros((R, n))
    onehot[inv, np.arange(n)] = 1.0
    yf = y.astype(float)
    iu, ju = np.triu_indices(P, 1)
    x, w = _GRID.nodes, _GRID.weights
    L = min(6.0 * omega, ZETA_CAP)
    zeta = L * x
    rho = np.tanh(zeta)
    logprior = -0.5 * (zeta / omega) ** 2 + np.log(w * L)
    sig = np.empty(iu.size)
    var = np.empty(iu.size)
    tiny = np.finfo(float).tiny
    for s in range(0, iu.size, chunk):
        a, b = iu[s:s + chunk], ju[s:s + chunk]
        # per design row counts of the four cells
        c11 = onehot @ (yf[:, a] * yf[:, b])
        c1 = onehot @ yf[:, a]
        c2 = onehot @ yf[:, b]
        cn = np.bincount(inv, minlength=R).astype(float)[:, None]
        cells = (c11, c1 - c11, c2 - c11, cn - c1 - c2 + c11)  # R x k
        e1, e2 = eta[:, a][..., None], eta[:, b][..., None]
        p11 = bivariate_normal_cdf(e1, e2, rho)
        p00 = bivariate_normal_cdf(-e1, -e2, rho)
        p10 = np.maximum(special.ndtr(e1) - p11, tiny)
        p01 = np.maximum(special.ndtr(e2) - p11, tiny)
        ll = np.zeros((a.size, GRID_ORDER))
        for c, p in zip(cells, (p11, p10, p01, p00)):
            ll += np.einsum("rk,rkg->kg", c, np.log(np.maximum(p, tiny)))
        lp = ll + logprior
        lp -= lp.max(axis=1, keepdims=True)
        post = np.exp(lp)
        post /= post.sum(axis=1, keepdims=True)
        m, v = _moments(rho[None, :], post)
        sig[s:s + chunk], var[s:s + chunk] = m, v
    return sig, np.maximum(var, tiny)
