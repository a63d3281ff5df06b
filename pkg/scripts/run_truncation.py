"""Truncation robustness study: fit at P in {250, 300, 400} and report IQRs."""
import argparse

from mvpibp.harness import ExperimentSpec, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", required=True)
    ap.add_argument("--reps", type=int, default=10)
    ap.add_argument("--kind", default="factor")
    args = ap.parse_args()
    spec = ExperimentSpec(kinds=(args.kind,), methods=("factor", "twostage-hier"), iterations=2000,
                          burn_in=500, truncations=(250, 300, 400))
    for r in run_experiment(spec, args.out, replicates=args.reps)["summary"]:
        if r["metric"].startswith("mse"):
            print(f"{r['scenario']:14s} {r['method']:14s} {r['metric']:10s} "
                  f"[{r['q25']:.4g}, {r['q75']:.4g}]")


if __name__ == "__main__":
    main()
