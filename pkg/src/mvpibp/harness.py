"""Simulation-study harness: scenario generators, estimation-error metrics and a
seeded replication driver that writes plot-ready tables.

Scenarios
---------
``factor``  data from the factor MVP-IBP with k = 3 standard-normal loadings;
``tobit``   latent rows from a multivariate t_10 with the factor Sigma* as its
            scale matrix (misspecified for every probit model);
``common``  equicorrelated Sigma* = rho 11' + (1 - rho) I with rho ~ U[0, 0.8].
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import special, stats

from .genprior import correlated_noise
from .mcmc import McmcConfig
from .model import CommonRho, FeatureMatrix, calibrate
from .numkit import LowRankCorrelation, equicorrelation
from .richness import expected_richness, predict_delta
from .sampler_factor import FactorHyper, fit_factor_mvpibp
from .sampler_ibp import fit_ibp
from .sampler_twostage import run_common_rho, run_flat_ablation, run_hierarchical

__all__ = [
    "Scenario",
    "ExperimentSpec",
    "generate_scenario",
    "mse_pi",
    "mse_sigma",
    "mse_sigma_from_moments",
    "mse_delta",
    "frob_error",
    "fit_method",
    "run_replicate",
    "run_experiment",
    "summarize",
    "win_rate",
    "truncate_columns",
    "score",
    "write_report",
    "METHODS",
    "KINDS",
]

log = logging.getLogger(__name__)

KINDS = ("factor", "tobit", "common")
METHODS = ("ibp", "factor", "twostage-hier", "twostage-common", "flat-ablation")
TOBIT_DF = 10
N_LOADINGS = 3
RHO_MAX = 0.8
METRIC_COLUMNS = ["scenario", "alpha", "method", "replicate", "metric", "value", "seed", "runtime_s"]


@dataclass
class Scenario:
    kind: str
    alpha: float
    n: int
    P: int
    seed: int
    beta: np.ndarray  # latent intercepts on the unit-variance scale
    sigma: np.ndarray  # Sigma* (t scale matrix for tobit)
    pi: np.ndarray
    rho: float | None = None
    n0: int = 40
    m: int = 10
    pstar_n0: int = 0  # observed richness of the first n0 rows

    @property
    def delta(self) -> float:
        """True increment: expected richness at n0 + m under pi* minus observed p*_{n0}."""
        return float(expected_richness(self.pi, self.n0 + self.m) - self.pstar_n0)


def generate_scenario(kind: str, alpha: float, n: int, P: int, rng: np.random.Generator,
                      seed: int = 0, n0: int = 40, m: int = 10):
    """Simulate one dataset of the requested kind and record its ground truth."""
    if kind not in KINDS:
        raise ValueError(f"unknown scenario kind {kind!r}; expected one of {KINDS}")
    cal = calibrate(alpha, P)
    beta = cal.mu_p + cal.tau_p * rng.standard_normal(P)
    rho = None
    if kind in ("factor", "tobit"):
        lam = rng.standard_normal((P, N_LOADINGS))
        lr = LowRankCorrelation(lam)
        sigma = lr.dense()
        eps = correlated_noise(lr, n, P, rng)
        if kind == "tobit":
            w = rng.chisquare(TOBIT_DF, size=(n, 1)) / TOBIT_DF
            eps = eps / np.sqrt(w)
            pi = stats.t.cdf(beta, TOBIT_DF)
        else:
            pi = special.ndtr(beta)
    else:
        rho = float(rng.uniform(0.0, RHO_MAX))
        sigma = equicorrelation(P, rho)
        eps = correlated_noise(CommonRho(rho), n, P, rng)
        pi = special.ndtr(beta)
    y = (beta + eps > 0).astype(np.uint8)
    Y = FeatureMatrix(y)
    n0 = min(n0, n)
    sc = Scenario(kind, float(alpha), n, P, int(seed), beta, sigma, pi, rho, n0, m,
                  int(np.count_nonzero(y[:n0].any(axis=0))))
    return Y, sc


def truncate_columns(Y: FeatureMatrix, P: int) -> tuple[FeatureMatrix, np.ndarray]:
    """Keep every observed column, then all-zero columns up to ``P`` in total.

    Returns the matrix and the indices of the kept original columns.
    """
    obs = np.flatnonzero(Y.entries.any(axis=0))
    if obs.size > P:
        raise ValueError(f"{obs.size} observed features exceed truncation {P}")
    zero = np.flatnonzero(~Y.entries.any(axis=0))[: max(P - obs.size, 0)]
    keep = np.concatenate([obs, zero])
    sub = FeatureMatrix(Y.entries[:, keep], Y.sample_ids,
                        [Y.feature_ids[j] for j in keep])
    return sub.padded(P), keep


# -- metrics ------------------------------------------------------------------------

def mse_pi(pi_draws, pi_true) -> float:
    """sum_j E[(pi_j - pi*_j)^2 | y] / P over the draws."""
    d = np.atleast_2d(pi_draws) - np.asarray(pi_true)
    return float(np.mean(d * d))


def mse_sigma(sigma_draws, sigma_true) -> float:
    """sum_jq E[(Sigma_jq - Sigma*_jq)^2 | y] / P^2 over B x P x P draws."""
    s = np.asarray(sigma_draws, dtype=float)
    if s.ndim == 2:
        s = s[None]
    d = s - np.asarray(sigma_true)
    return float(np.mean(d * d))


def mse_sigma_from_moments(mean, sq_mean, sigma_true) -> float:
    """Same quantity from running first and second posterior moments."""
    t = np.asarray(sigma_true)
    return float(np.mean(np.asarray(sq_mean) - 2 * t * np.asarray(mean) + t * t))


def mse_delta(delta_draws, delta_true) -> float:
    d = np.asarray(delta_draws, dtype=float) - delta_true
    return float(np.mean(d * d))


def frob_error(estimate, truth, normalizer: float | None = None) -> float:
    """Frobenius norm of the difference over ``normalizer`` (P for vectors,
    P^2 for P x P matrices by default)."""
    est = np.asarray(estimate, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch {est.shape} vs {tru.shape}")
    if normalizer is None:
        normalizer = est.shape[0] ** est.ndim if est.ndim else 1.0
    return float(np.linalg.norm(est - tru) / normalizer)


# -- fitting ------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    kinds: tuple = KINDS
    methods: tuple = ("ibp", "factor", "twostage-hier", "flat-ablation")
    alphas: tuple = tuple(range(2, 41, 2))  # replicate r uses alphas[r]
    n: int = 80
    P: int = 300
    truncations: tuple | None = None  # None: fit at P directly
    iterations: int = 2500  # Gibbs cycles including burn-in
    burn_in: int = 500
    twostage_T: int = 200
    twostage_burn: int = 50
    k_max: int = 10
    n0: int = 40
    m: int = 10
    seed: int = 20261014
    workers: int | None = None

    @classmethod
    def smoke(cls, **kw):
        base = dict(alphas=(8, 16, 24, 32, 40), n=40, P=60)
        base.update(kw)
        return cls(**base)

    def hash(self) -> str:
        d = asdict(self)
        d.pop("workers")
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=list).encode()).hexdigest()[:16]


@dataclass
class FitSummary:
    pi_draws: np.ndarray
    sigma_mean: np.ndarray
    sigma_sq_mean: np.ndarray
    extra: dict = field(default_factory=dict)


def _gamma_prior(Y: FeatureMatrix):
    # centred on the mean number of features per sample: shape = mean, rate = 1
    return max(float(Y.entries.sum(axis=1).mean()), 1e-2), 1.0


def fit_method(method: str, Y: FeatureMatrix, P: int, spec: ExperimentSpec, seed: int) -> FitSummary:
    rng = np.random.default_rng(seed)
    prior = _gamma_prior(Y)
    eye = np.eye(P)
    if method == "ibp":
        ch = fit_ibp(Y, P, prior=prior, mcmc=McmcConfig(spec.iterations, spec.burn_in, seed=seed), rng=rng)
        return FitSummary(ch.pi_draws, eye, eye, {"alpha_mean": float(ch.alpha_draws.mean())})
    if method == "factor":
        hyper = FactorHyper(a_alpha=prior[0], b_alpha=prior[1], k_max=min(spec.k_max, P))
        out = fit_factor_mvpibp(Y, P, hyper, McmcConfig(spec.iterations, spec.burn_in, seed=seed), rng=rng)
        return FitSummary(out.pi_draws, out.sigma_mean, out.sigma_sq_mean,
                          {"alpha_mean": float(out.alpha_draws.mean()),
                           "k_mode": int(np.bincount(out.k_active_draws).argmax())})
    mc = McmcConfig(spec.twostage_T, spec.twostage_burn, seed=seed)
    if method == "twostage-hier":
        out = run_hierarchical(Y, P, priors=(*prior, 1.0, 1.0), mcmc=mc, rng=rng)
    elif method == "flat-ablation":
        out = run_flat_ablation(Y, P, priors=(*prior, 1.0, 1.0), mcmc=mc, rng=rng)
    elif method == "twostage-common":
        out = run_common_rho(Y, P, priors=(*prior, 1.0), mcmc=mc, rng=rng)
        r = out.rho_draws
        m1, m2 = float(r.mean()), float(np.mean(r * r))
        mean = np.full((P, P), m1)
        sq = np.full((P, P), m2)
        np.fill_diagonal(mean, 1.0)
        np.fill_diagonal(sq, 1.0)
        return FitSummary(out.pi_draws, mean, sq, {"alpha_mean": float(out.alpha_draws.mean())})
    else:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return FitSummary(out.pi_draws, out.sigma_mean, out.sigma_sq_mean,
                      {"alpha_mean": float(out.alpha_draws.mean())})


def score(fit: FitSummary, sc: Scenario, cols=None) -> dict:
    """MSE-style and Frobenius metrics; ``cols`` restricts pi and Sigma to a
    subset of the true columns (aligned with the first len(cols) fitted ones)."""
    pi_true, sig_true = sc.pi, sc.sigma
    pi_d, s1, s2 = fit.pi_draws, fit.sigma_mean, fit.sigma_sq_mean
    fc = slice(None)
    if cols is not None:
        pi_true = pi_true[cols]
        sig_true = sig_true[np.ix_(cols, cols)]
        fc = slice(0, len(cols))
    fc_pi = pi_d[:, fc]
    fs1, fs2 = s1[fc, fc], s2[fc, fc]
    fore = predict_delta(pi_d, sc.n0, sc.m, sc.pstar_n0)
    return {
        "mse_pi": mse_pi(fc_pi, pi_true),
        "mse_sigma": mse_sigma_from_moments(fs1, fs2, sig_true),
        "mse_delta": mse_delta(fore.delta_draws, sc.delta),
        "frob_pi": frob_error(fc_pi.mean(axis=0), pi_true),
        "frob_sigma": frob_error(fs1, sig_true),
        "frob_delta": frob_error(fore.mean, sc.delta),
    }


def _replicate_seeds(spec: ExperimentSpec, kind_idx: int, rep: int) -> tuple[int, int]:
    ss = np.random.SeedSequence(spec.seed, spawn_key=(kind_idx, rep))
    data_seed, fit_seed = (int(c.generate_state(1)[0]) for c in ss.spawn(2))
    return data_seed, fit_seed


def run_replicate(spec: ExperimentSpec, kind: str, rep: int) -> tuple[list, dict]:
    """Generate one dataset, fit every method (at every truncation), score.

    Failures of single fits are recorded and do not stop the replicate.
    """
    kind_idx = KINDS.index(kind)
    alpha = spec.alphas[rep % len(spec.alphas)]
    data_seed, fit_seed = _replicate_seeds(spec, kind_idx, rep)
    Y, sc = generate_scenario(kind, alpha, spec.n, spec.P, np.random.default_rng(data_seed),
                              seed=data_seed, n0=spec.n0, m=spec.m)
    rows, info = [], {"kind": kind, "replicate": rep, "alpha": alpha, "data_seed": data_seed,
                      "pstar": int(Y.entries.any(axis=0).sum()), "rho": sc.rho, "failures": [],
                      "estimates": []}
    truncs = spec.truncations or (None,)
    for t in truncs:
        if t is None:
            Yf, P, cols = Y, spec.P, None
        else:
            Yf, keep = truncate_columns(Y, t)
            P = t
            cols = keep[Yf.entries[:, : keep.size].any(axis=0)]  # observed columns only
        label = kind if t is None else f"{kind}@P{t}"
        for mi, method in enumerate(spec.methods):
            seed = int(np.random.SeedSequence(fit_seed, spawn_key=(mi, P)).generate_state(1)[0])
            t0 = time.perf_counter()
            try:
                fit = fit_method(method, Yf, P, spec, seed)
                metrics = score(fit, sc, cols)
            except Exception as err:  # isolate one failed fit
                log.warning("%s rep %d %s failed: %s", label, rep, method, err)
                info["failures"].append({"scenario": label, "method": method, "error": repr(err)})
                metrics = {"error": float("nan")}
                fit = None
            runtime = time.perf_counter() - t0
            for name, val in metrics.items():
                rows.append([label, alpha, method, rep, name, val, seed, runtime])
            if fit is not None:
                info["estimates"].append({"scenario": label, "method": method,
                                          "pi_mean_head": [float(v) for v in fit.pi_draws.mean(axis=0)[:5]],
                                          **fit.extra})
    return rows, info


def _worker_count(spec: ExperimentSpec) -> int:
    if spec.workers is not None:
        return max(1, spec.workers)
    env = os.environ.get("MVPIBP_THREADS")
    return max(1, int(env)) if env else 1


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_experiment(spec: ExperimentSpec, out_dir: str | None = None, replicates: int | None = None) -> dict:
    """Run every (scenario, replicate) task and write ``metrics.csv``,
    ``summary.csv``, ``estimates.json`` and ``manifest.json`` to ``out_dir``.

    Tasks run in worker processes when ``MVPIBP_THREADS`` (or ``spec.workers``)
    exceeds one; every task owns seeds derived from ``spec.seed`` by scenario
    and replicate index, so the tables do not depend on the worker count.
    """
    reps = replicates if replicates is not None else len(spec.alphas)
    tasks = [(spec, kind, r) for kind in spec.kinds for r in range(reps)]
    workers = _worker_count(spec)
    t0 = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(run_replicate, *zip(*tasks)))
    else:
        results = [run_replicate(*t) for t in tasks]
    rows = [r for res in results for r in res[0]]
    infos = [res[1] for res in results]
    report = {"rows": rows, "infos": infos, "summary": summarize(rows),
              "manifest": {"spec": asdict(spec), "spec_hash": spec.hash(), "replicates": reps,
                           "package_version": _version(), "numpy": np.__version__,
                           "failures": [f for i in infos for f in i["failures"]]}}
    if out_dir is not None:
        write_report(report, out_dir, wall=time.perf_counter() - t0)
    return report


def _version():
    from . import __version__
    return __version__


def summarize(rows) -> list[dict]:
    """Per (scenario, method, metric): quartiles across replicates."""
    groups: dict = {}
    for scen, _, method, _, metric, val, *_ in rows:
        groups.setdefault((scen, method, metric), []).append(val)
    out = []
    for (scen, method, metric), vals in sorted(groups.items()):
        v = np.asarray(vals, dtype=float)
        v = v[np.isfinite(v)]
        q = np.quantile(v, [0.25, 0.5, 0.75]) if v.size else [np.nan] * 3
        out.append({"scenario": scen, "method": method, "metric": metric, "n": int(v.size),
                    "q25": float(q[0]), "median": float(q[1]), "q75": float(q[2])})
    return out


def win_rate(rows, scenario: str, metric: str, better: str, worse: str) -> float:
    """Share of replicates where ``better`` has the strictly smaller metric."""
    vals: dict = {}
    for scen, _, method, rep, met, val, *_ in rows:
        if scen == scenario and met == metric and method in (better, worse):
            vals.setdefault(rep, {})[method] = val
    pairs = [(d[better], d[worse]) for d in vals.values() if better in d and worse in d]
    if not pairs:
        return float("nan")
    return float(np.mean([b < w for b, w in pairs]))


def write_report(report: dict, out_dir: str, wall: float | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in report["rows"]:
            w.writerow([_fmt(v) for v in r])
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["scenario", "method", "metric", "n", "q25", "median", "q75"],
                           lineterminator="\n")
        w.writeheader()
        for r in report["summary"]:
            w.writerow({k: _fmt(v) for k, v in r.items()})
    with open(os.path.join(out_dir, "estimates.json"), "w") as fh:
        json.dump(report["infos"], fh, indent=1, sort_keys=True)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(report["manifest"], fh, indent=1, sort_keys=True, default=list)
    # timings are not reproducible; keep them apart from the deterministic files
    with open(os.path.join(out_dir, "timing.json"), "w") as fh:
        json.dump({"wall_s": wall, "finished": time.strftime("%Y-%m-%dT%H:%M:%S")}, fh)
