"""Shared MCMC plumbing: run configuration, adaptive random-walk steps, stable
log-Beta draws and convergence diagnostics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special

__all__ = ["McmcConfig", "LogRandomWalk", "log_beta_draw", "log_gamma_draw",
           "batch_means_se", "geweke_z", "NumericalFailure"]


class NumericalFailure(RuntimeError):
    """A sampler produced a non-finite state."""


@dataclass(frozen=True)
class McmcConfig:
    """``iterations`` counts every cycle including the ``burn_in`` ones."""

    iterations: int = 2500
    burn_in: int = 500
    thin: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.burn_in < 0 or self.iterations <= self.burn_in:
            raise ValueError(f"need iterations > burn_in >= 0, got {self.iterations}, {self.burn_in}")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")

    @property
    def n_kept(self) -> int:
        return (self.iterations - self.burn_in) // self.thin

    def keep(self, it: int) -> bool:
        """Whether cycle ``it`` (0-based) is stored."""
        k = it - self.burn_in
        return k >= 0 and (k + 1) % self.thin == 0 and k // self.thin < self.n_kept


class LogRandomWalk:
    """Random-walk Metropolis on ``log x`` for a positive scalar.

    The proposal scale adapts during burn-in towards an acceptance rate in
    ``target`` and is frozen afterwards.
    """

    def __init__(self, scale: float = 0.2, target=(0.3, 0.5), window: int = 50):
        self.scale = float(scale)
        self.target = target
        self.window = window
        self._acc = 0
        self._n = 0
        self.accepted = 0
        self.proposed = 0

    def step(self, x: float, log_target, rng: np.random.Generator, adapt: bool = False) -> float:
        """One MH step; ``log_target(x)`` is the log density of ``x`` itself."""
        y = x * np.exp(self.scale * rng.standard_normal())
        # log Jacobian of the log transform: log y - log x
        log_ratio = log_target(y) - log_target(x) + np.log(y) - np.log(x)
        accept = np.log(rng.random()) < log_ratio
        self.proposed += 1
        if accept:
            self.accepted += 1
        if adapt:
            self._acc += int(accept)
            self._n += 1
            if self._n == self.window:
                rate = self._acc / self._n
                if rate < self.target[0]:
                    self.scale *= 0.8
                elif rate > self.target[1]:
                    self.scale *= 1.25
                self._acc = self._n = 0
        return y if accept else x

    @property
    def acceptance(self) -> float:
        return self.accepted / max(self.proposed, 1)


def log_gamma_draw(shape, rng: np.random.Generator, size=None):
    """log of Gamma(shape, 1) draws, accurate for shape << 1."""
    shape = np.asarray(shape, dtype=float)
    # G(a) =d G(a + 1) U^(1/a)
    g = rng.standard_gamma(shape + 1.0, size=size)
    u = rng.random(size=g.shape)
    return np.log(g) + np.log(u) / shape


def log_beta_draw(a, b, rng: np.random.Generator, size=None):
    """``(log X, log(1 - X))`` for X ~ Beta(a, b) without underflow for tiny a."""
    la = log_gamma_draw(a, rng, size)
    lb = log_gamma_draw(b, rng, la.shape)
    tot = np.logaddexp(la, lb)
    return la - tot, lb - tot


def batch_means_se(x, n_batches: int = 40) -> float:
    """Standard error of the mean of an autocorrelated series by batch means."""
    x = np.asarray(x, dtype=float)
    m = x.size // n_batches
    if m < 2:
        return float(x.std(ddof=1) / np.sqrt(x.size))
    means = x[: m * n_batches].reshape(n_batches, m).mean(axis=1)
    return float(means.std(ddof=1) / np.sqrt(n_batches))


def geweke_z(x, first: float = 0.1, last: float = 0.5) -> float:
    """Geweke convergence diagnostic comparing early and late segment means."""
    x = np.asarray(x, dtype=float)
    a = x[: int(first * x.size)]
    b = x[int((1 - last) * x.size):]
    se = np.hypot(batch_means_se(a, 10), batch_means_se(b, 20))
    return float((a.mean() - b.mean()) / se) if se > 0 else 0.0


def gamma_logpdf(x, shape, rate):
    return shape * np.log(rate) - special.gammaln(shape) + (shape - 1) * np.log(x) - rate * x
