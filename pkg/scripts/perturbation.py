"""Per-view optimal thresholds of a ReLU baseline on the slanted slab."""
import argparse
import logging

from spikenerf.experiments import run_perturbation

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/perturbation")
    ap.add_argument("--iterations", type=int, default=5000)
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    r = run_perturbation(f"{a.out}/data", f"{a.out}/train", a.iterations)
    sw = r.sweep
    print("per-view best tau:", sw.best_tau, "errors:", sw.best_error)
    print(f"spread {sw.spread:.4f}  best global tau {sw.best_global_tau:.4f}  error {sw.best_global_error:.4f}")
