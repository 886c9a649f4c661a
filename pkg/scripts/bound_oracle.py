"""Randomised check of the two-sided extracted-vs-integrated depth bound."""
import argparse

from spikenerf.experiments import run_bound_oracle

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/bound_oracle.csv")
    ap.add_argument("--trials", type=int, default=10000)
    ap.add_argument("--seed", type=int, default=7)
    a = ap.parse_args()
    print("violations:", run_bound_oracle(a.out, a.trials, a.seed))
