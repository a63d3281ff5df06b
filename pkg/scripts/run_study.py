"""Full simulation study over the three scenarios (20 replicates, n=80, P=300).

Writes metrics.csv / summary.csv / estimates.json / manifest.json to --out and
prints the ordinal win rates.  Several hours on one core; set MVPIBP_THREADS
to run replicates in parallel.
"""
import argparse

from mvpibp.harness import ExperimentSpec, run_experiment, win_rate


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", required=True)
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--smoke", action="store_true", help="n=40, P=60 preset")
    args = ap.parse_args()
    spec = (ExperimentSpec.smoke if args.smoke else ExperimentSpec)(iterations=2000, burn_in=500)
    rows = run_experiment(spec, args.out, replicates=args.reps)["rows"]
    for kind in spec.kinds:
        for metric in ("mse_pi", "mse_sigma", "mse_delta"):
            print(f"{kind:7s} {metric:10s} factor<ibp {win_rate(rows, kind, metric, 'factor', 'ibp'):.2f}  "
                  f"hier<flat {win_rate(rows, kind, metric, 'twostage-hier', 'flat-ablation'):.2f}")


if __name__ == "__main__":
    main()
