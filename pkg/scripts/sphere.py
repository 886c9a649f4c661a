"""Sphere desk scene: B-FIF depth error and Chamfer distance after training."""
import argparse
import logging

from spikenerf.experiments import run_sphere

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/sphere")
    ap.add_argument("--iterations", type=int, default=20000)
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    r = run_sphere(f"{a.out}/data", f"{a.out}/train", a.iterations)
    print(f"mean depth error {r.mean_error:.4f}  chamfer {r.chamfer:.4f}  3*dt {3 * r.dt:.4f}  "
          f"misses {r.misses}  false surfaces {r.false_surfaces}")
