"""Command-line entry point: ``mvpibp {simulate,fit,predict,theory-check,experiment}``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.  Logs go to
standard error; results are written only under ``--out`` (theory-check also
prints its table to standard output).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__

log = logging.getLogger("mvpibp")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3

# flag name -> RunConfig field
_FIT_FLAGS = {"method": "method", "iters": "iterations", "burnin": "burn_in", "thin": "thin",
              "seed": "seed", "trunc": "P", "alpha": "alpha", "data": "data",
              "covariates": "covariates"}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvpibp", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=out_required, help="output directory")
        sp.add_argument("--config", help="key = value file; flags override its values")

    s = sub.add_parser("simulate", help="simulate an occurrence matrix with recorded truth")
    common(s)
    s.add_argument("--method", default="factor",
                   help="data generator: factor, tobit, common, pibp or ibp")
    s.add_argument("--alpha", type=float, default=10.0)
    s.add_argument("--trunc", type=int, default=300, help="number of features P")
    s.add_argument("-n", type=int, default=80, help="number of samples")

    f = sub.add_parser("fit", help="run a posterior sampler and archive its draws")
    common(f)
    f.add_argument("--method")
    f.add_argument("--data", help="occurrence CSV")
    f.add_argument("--covariates", help="covariates CSV")
    f.add_argument("--alpha", type=float, help="initial alpha")
    f.add_argument("--trunc", type=int, help="truncation level P")
    f.add_argument("--iters", type=int, help="cycles including burn-in")
    f.add_argument("--burnin", type=int)
    f.add_argument("--thin", type=int)
    f.add_argument("--force", action="store_true", help="overwrite an archive with another config")

    pr = sub.add_parser("predict", help="new-feature forecast from an archive")
    common(pr)
    pr.add_argument("--archive", required=True, help="directory written by fit")
    pr.add_argument("--data", help="occurrence CSV (defaults to the one in the archive manifest)")
    pr.add_argument("--n0", type=int, help="samples already observed (default: all)")
    pr.add_argument("-m", type=int, default=10, help="additional samples")

    t = sub.add_parser("theory-check", help="Monte Carlo checks of the prior's limit results")
    common(t, out_required=False)
    t.add_argument("--alpha", type=float, default=5.0)
    t.add_argument("--trunc", type=int, default=20000)
    t.add_argument("--reps", type=int, default=1000)

    e = sub.add_parser("experiment", help="simulation study over scenarios and methods")
    common(e)
    e.add_argument("--reps", type=int, help="replicates per scenario")
    e.add_argument("--smoke", action="store_true", help="small n, P preset")
    e.add_argument("-n", type=int)
    e.add_argument("--trunc", type=int, help="truncation level P")
    e.add_argument("--iters", type=int)
    e.add_argument("--burnin", type=int)
    return p


def _merged(args, mapping: dict) -> dict:
    """Config-file values overridden by the flags that were given."""
    vals = {}
    if args.config:
        from .io import load_config
        vals.update(load_config(args.config))
    for flag, key in mapping.items():
        v = getattr(args, flag, None)
        if v is not None:
            vals[key] = v
    return vals


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True, default=float)
        fh.write("\n")


def cmd_simulate(args) -> int:
    from .io import ValidationError, save_occurrence_csv, write_draw_table
    from .runner import simulate_run
    vals = _merged(args, {"method": "method", "alpha": "alpha", "trunc": "P", "n": "n", "seed": "seed"})
    try:
        kind, alpha = str(vals.get("method", "factor")), float(vals.get("alpha", 10.0))
        P, n, seed = int(vals.get("P", 300)), int(vals.get("n", 80)), int(vals.get("seed", 0))
    except ValueError as err:
        raise ValidationError(str(err)) from None
    Y, truth, info = simulate_run(kind, alpha, P, n, seed)
    os.makedirs(args.out, exist_ok=True)
    save_occurrence_csv(Y, os.path.join(args.out, "occurrence.csv"))
    write_draw_table(os.path.join(args.out, "truth.csv"), truth)
    info["pstar"] = int(Y.entries.any(axis=0).sum())
    _write_json(os.path.join(args.out, "simulation.json"), info)
    log.info("simulated %s data: n=%d P=%d observed p*=%d", kind, n, P, info["pstar"])
    return EXIT_OK


def cmd_fit(args) -> int:
    from .io import (PosteriorArchive, RunConfig, ValidationError, file_digest,
                     load_covariates_csv, load_occurrence_csv)
    from .runner import fit_run
    cfg = RunConfig.from_mapping(_merged(args, _FIT_FLAGS))
    if cfg.data is None:
        raise ValidationError("fit needs --data")
    Y = load_occurrence_csv(cfg.data)
    X = None
    if cfg.covariates:
        X, names = load_covariates_csv(cfg.covariates, Y.sample_ids)
    ch = cfg.hash(file_digest(cfg.data), file_digest(cfg.covariates))
    archive = PosteriorArchive(args.out)
    archive.check_writable(ch, args.force)  # fail before the expensive part
    t0 = time.perf_counter()
    log.info("fitting %s: n=%d observed p=%d P=%d iterations=%d", cfg.method, Y.n, Y.p, cfg.P, cfg.iterations)
    draws, summary, info = fit_run(cfg, Y, X)
    draws = {k: v for k, v in draws.items() if v is not None}
    manifest = {"config": {**cfg.__dict__}, "config_hash": ch, "seed": cfg.seed,
                "n_kept": (cfg.iterations - cfg.burn_in) // cfg.thin, "package_version": __version__,
                "numpy": np.__version__, "sampler": _jsonable(info),
                "feature_ids": Y.feature_ids, "n": Y.n,
                "observed_pstar": int(Y.entries.any(axis=0).sum())}
    archive.write(manifest, draws, summary, force=args.force)
    _write_json(os.path.join(args.out, "timing.json"), {"fit_s": time.perf_counter() - t0})
    log.info("wrote archive %s (%d parameters)", args.out, len(draws))
    return EXIT_OK


def _jsonable(d):
    out = {}
    for k, v in dict(d).items():
        if isinstance(v, (bool, int, float, str)) or v is None:
            out[k] = v
        elif isinstance(v, np.generic):
            out[k] = v.item()
    return out


def cmd_predict(args) -> int:
    from .io import PosteriorArchive, ValidationError, load_occurrence_csv, write_draw_table
    from .richness import accumulation_curve, predict_delta
    from scipy import special
    archive = PosteriorArchive(args.archive)
    if not archive.exists():
        raise ValidationError(f"no archive at {args.archive}")
    man = archive.manifest()
    draws = archive.draws()
    if "pi" in draws:
        pis = draws["pi"]
    elif "beta_tilde" in draws:
        pis = special.ndtr(draws["beta_tilde"])
    elif "beta" in draws:
        pis = special.ndtr(draws["beta"])
    else:
        raise ValidationError("archive has no occurrence-probability draws")
    data = args.data or man["config"].get("data")
    if data is None:
        raise ValidationError("predict needs --data")
    Y = load_occurrence_csv(data)
    n0 = args.n0 if args.n0 is not None else Y.n
    if not 1 <= n0 <= Y.n or args.m < 1:
        raise ValidationError(f"need 1 <= n0 <= {Y.n} and m >= 1")
    observed = int(Y.entries[:n0].any(axis=0).sum())
    fc = predict_delta(pis, n0, args.m, observed)
    curve = accumulation_curve(pis, np.arange(1, n0 + args.m + 1))
    os.makedirs(args.out, exist_ok=True)
    write_draw_table(os.path.join(args.out, "forecast.csv"),
                     {"delta": fc.delta_draws[:, None], "expected_pstar_n0": fc.expected_pstar_n0[:, None]})
    _write_json(os.path.join(args.out, "forecast.json"),
                {"n0": n0, "m": args.m, "observed_pstar_n0": observed, "delta_mean": fc.mean,
                 "delta_quantiles": {str(k): float(v) for k, v in fc.quantiles.items()},
                 "curve": {k: np.asarray(v).tolist() for k, v in curve.items()}})
    log.info("forecast: %d new features expected in %d samples (observed p*=%d)",
             round(fc.mean), args.m, observed)
    return EXIT_OK


def cmd_theory_check(args) -> int:
    from .io import ValidationError
    from .theory import format_table, run_theory_checks
    vals = _merged(args, {"alpha": "alpha", "trunc": "P", "reps": "reps", "seed": "seed"})
    try:
        alpha, P = float(vals.get("alpha", 5.0)), int(vals.get("P", 20000))
        reps, seed = int(vals.get("reps", 1000)), int(vals.get("seed", 0))
    except ValueError as err:
        raise ValidationError(str(err)) from None
    if not alpha > 0 or P < 2 or reps < 2:
        raise ValidationError("need alpha > 0, trunc >= 2 and reps >= 2")
    checks = run_theory_checks(alpha, P, reps, seed)
    print(format_table(checks))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "theory_checks.json"),
                    {"alpha": alpha, "P": P, "reps": reps, "seed": seed,
                     "checks": [c.as_dict() for c in checks]})
    log.info("%d of %d checks passed", sum(c.passed for c in checks), len(checks))
    return EXIT_OK


def _spec_from(vals: dict, smoke: bool):
    from dataclasses import fields
    from .harness import ExperimentSpec
    from .io import ValidationError
    types = {f.name: f.type for f in fields(ExperimentSpec)}
    kw = {}
    for k, v in vals.items():
        if k == "reps":
            continue
        if k not in types:
            raise ValidationError(f"unknown experiment setting {k!r}")
        t = str(types[k])
        try:
            if "tuple" in t:
                items = [s.strip() for s in str(v).split(",") if s.strip()] if isinstance(v, str) else list(v)
                conv = str if k in ("kinds", "methods") else (float if k == "alphas" else int)
                kw[k] = tuple(conv(s) for s in items)
            elif "int" in t:
                kw[k] = int(v)
            else:
                kw[k] = v
        except ValueError:
            raise ValidationError(f"experiment setting {k!r}: cannot parse {v!r}") from None
    return ExperimentSpec.smoke(**kw) if smoke else ExperimentSpec(**kw)


def cmd_experiment(args) -> int:
    from .harness import run_experiment
    vals = _merged(args, {"n": "n", "trunc": "P", "iters": "iterations", "burnin": "burn_in",
                          "seed": "seed", "reps": "reps"})
    reps = int(vals["reps"]) if "reps" in vals else None
    spec = _spec_from(vals, args.smoke)
    log.info("experiment %s: kinds=%s methods=%s", spec.hash(), spec.kinds, spec.methods)
    report = run_experiment(spec, args.out, replicates=reps)
    fails = report["manifest"]["failures"]
    if fails:
        log.warning("%d fits failed; see manifest.json", len(fails))
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict,
            "theory-check": cmd_theory_check, "experiment": cmd_experiment}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s level=%(levelname)s logger=%(name)s msg=%(message)s")
    from .io import ValidationError
    from .mcmc import NumericalFailure
    try:
        return COMMANDS[args.command](args)
    except (ValidationError, FileNotFoundError) as err:
        log.error("invalid input: %s", err)
        return EXIT_INVALID
    except (NumericalFailure, np.linalg.LinAlgError, FloatingPointError) as err:
        log.error("numerical failure: %s", err)
        return EXIT_NUMERICAL
    except ValueError as err:
        log.error("invalid input: %s", err)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
