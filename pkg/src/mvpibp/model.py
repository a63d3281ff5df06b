"""Model-level value types and the alpha <-> (mu_p, tau_p) calibration."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy.special import ndtri

from .numkit import std_normal_cdf, std_normal_quantile

__all__ = [
    "FeatureMatrix",
    "IbpCalibration",
    "calibrate",
    "marginal_prob",
    "fisher_z",
    "fisher_z_inv",
    "Identity",
    "CommonRho",
    "HierarchicalZ",
    "Factor",
    "CuspHyper",
    "CorrelationModel",
    "IndependentNormal",
    "NIW",
    "CovariateDesign",
]


@dataclass
class FeatureMatrix:
    """n x p binary occurrence matrix with row and column labels."""

    entries: np.ndarray
    sample_ids: list = field(default=None)
    feature_ids: list = field(default=None)

    def __post_init__(self):
        y = np.asarray(self.entries)
        if y.ndim != 2:
            raise ValueError(f"occurrence matrix must be 2-d, got shape {y.shape}")
        if not np.all((y == 0) | (y == 1)):
            bad = np.argwhere((y != 0) & (y != 1))[0]
            raise ValueError(f"non-binary entry at (row {bad[0]}, col {bad[1]})")
        self.entries = y.astype(np.uint8)
        n, p = self.entries.shape
        if self.sample_ids is None:
            self.sample_ids = [f"s{i + 1}" for i in range(n)]
        if self.feature_ids is None:
            self.feature_ids = [f"f{j + 1}" for j in range(p)]
        self.sample_ids = list(self.sample_ids)
        self.feature_ids = list(self.feature_ids)
        if len(self.sample_ids) != n or len(self.feature_ids) != p:
            raise ValueError("label lists do not match matrix dimensions")

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def p(self) -> int:
        return self.entries.shape[1]

    def padded(self, P: int) -> "FeatureMatrix":
        """Append all-zero columns up to truncation level ``P``."""
        if P < self.p:
            raise ValueError(f"truncation P={P} below observed p={self.p}")
        if P == self.p:
            return self
        extra = np.zeros((self.n, P - self.p), dtype=np.uint8)
        ids = self.feature_ids + [f"_pad{j + 1}" for j in range(P - self.p)]
        return FeatureMatrix(np.hstack([self.entries, extra]), self.sample_ids, ids)


@dataclass(frozen=True)
class IbpCalibration:
    alpha: float
    p: int
    mu_p: float
    tau_p: float

    @property
    def marginal(self) -> float:
        """Prior marginal occurrence probability ``alpha / (alpha + p)``."""
        return self.alpha / (self.alpha + self.p)


def calibrate(alpha: float, p: int) -> IbpCalibration:
    """Prior location and scale for the intercepts so that each feature has
    marginal probability ``alpha / (alpha + p)``."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if int(p) != p or p < 2:
        raise ValueError(f"truncation p must be an integer >= 2, got {p}")
    tau = np.sqrt(2.0 * np.log(p))
    mu = np.sqrt(1.0 + tau * tau) * std_normal_quantile(alpha / (alpha + p))
    return IbpCalibration(alpha=float(alpha), p=int(p), mu_p=float(mu), tau_p=float(tau))


def calibrated_mu(alpha, p: int):
    """Vectorised ``mu_p`` over alpha; ``tau_p`` does not depend on alpha."""
    tau2 = 2.0 * np.log(p)
    alpha = np.asarray(alpha, dtype=float)
    return np.sqrt(1.0 + tau2) * ndtri(alpha / (alpha + p))


def marginal_prob(beta):
    return std_normal_cdf(beta)


def fisher_z(rho):
    rho = np.asarray(rho, dtype=float)
    if np.any(np.abs(rho) >= 1.0):
        raise ValueError("Fisher z requires |rho| < 1")
    out = np.arctanh(rho)
    return float(out) if out.ndim == 0 else out


def fisher_z_inv(zeta):
    out = np.tanh(np.asarray(zeta, dtype=float))
    return float(out) if out.ndim == 0 else out


# correlation models ---------------------------------------------------------

@dataclass(frozen=True)
class Identity:
    pass


@dataclass(frozen=True)
class CommonRho:
    rho: float = 0.0
    w0: float = 1.0

    def __post_init__(self):
        if not abs(self.rho) < 1:
            raise ValueError("common correlation needs |rho| < 1")
        if not self.w0 > 0:
            raise ValueError("w0 must be positive")

    def is_pd(self, p: int) -> bool:
        return self.rho > -1.0 / (p - 1) if p > 1 else True

    def eigenvalues(self, p: int) -> tuple[float, float]:
        return 1.0 + (p - 1) * self.rho, 1.0 - self.rho


@dataclass(frozen=True)
class HierarchicalZ:
    a_omega: float = 1.0
    b_omega: float = 1.0


@dataclass(frozen=True)
class CuspHyper:
    a_theta: float = 2.0
    b_theta: float = 2.0
    theta_inf: float = 0.05
    kappa: float = 5.0

    def __post_init__(self):
        if min(self.a_theta, self.b_theta, self.theta_inf, self.kappa) <= 0:
            raise ValueError("CUSP hyperparameters must be positive")


@dataclass(frozen=True)
class Factor:
    k_max: int = 30
    cusp: CuspHyper = field(default_factory=CuspHyper)
    # fixed loadings, only used when simulating
    loadings: np.ndarray | None = None


CorrelationModel = Union[Identity, CommonRho, HierarchicalZ, Factor]


# covariates -----------------------------------------------------------------

@dataclass(frozen=True)
class IndependentNormal:
    """``b_j ~ N(gamma, psi I)``; ``gamma`` defaults to zero."""

    psi: float = 1.0
    gamma: Sequence[float] | None = None


@dataclass(frozen=True)
class NIW:
    gamma0: np.ndarray
    iota: float
    d: float
    Xi: np.ndarray


@dataclass
class CovariateDesign:
    X: np.ndarray
    prior: IndependentNormal | NIW = field(default_factory=IndependentNormal)
    # fixed (gamma, Psi) for simulation; defaults derive from the prior
    gamma: np.ndarray | None = None
    Psi: np.ndarray | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if not np.all(np.isfinite(X)):
            raise ValueError("covariates must be finite")
        self.X = X
        q = X.shape[1]
        if isinstance(self.prior, NIW):
            Xi = np.atleast_2d(np.asarray(self.prior.Xi, dtype=float))
            if self.prior.d <= q - 1:
                raise ValueError("NIW degrees of freedom must exceed q - 1")
            np.linalg.cholesky(Xi)
        if self.gamma is None:
            if isinstance(self.prior, NIW):
                self.gamma = np.asarray(self.prior.gamma0, dtype=float).reshape(q)
            elif self.prior.gamma is not None:
                self.gamma = np.asarray(self.prior.gamma, dtype=float).reshape(q)
            else:
                self.gamma = np.zeros(q)
        else:
            self.gamma = np.asarray(self.gamma, dtype=float).reshape(q)
        if self.Psi is None:
            if isinstance(self.prior, NIW):
                Xi = np.atleast_2d(np.asarray(self.prior.Xi, dtype=float))
                denom = self.prior.d - q - 1
                self.Psi = Xi / denom if denom > 0 else Xi
            else:
                self.Psi = self.prior.psi * np.eye(q)
        else:
            self.Psi = np.atleast_2d(np.asarray(self.Psi, dtype=float))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def q(self) -> int:
        return self.X.shape[1]

    def check_rows(self, n: int) -> None:
        if self.n != n:
            raise ValueError(f"covariate rows ({self.n}) do not match occurrence rows ({n})")
