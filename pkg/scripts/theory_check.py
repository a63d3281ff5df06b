"""Print the limit-theorem Monte Carlo table (same as `mvpibp theory-check`)."""
import argparse

from mvpibp.theory import format_table, run_theory_checks


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--alpha", type=float, default=5.0)
    ap.add_argument("--trunc", type=int, default=20000)
    ap.add_argument("--reps", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args()
    print(format_table(run_theory_checks(a.alpha, a.trunc, a.reps, a.seed)))


if __name__ == "__main__":
    main()
