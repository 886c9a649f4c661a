"""1D step-scene run: extracted depth vs the bound during training."""
import argparse
import logging

from spikenerf.experiments import run_line

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/line")
    ap.add_argument("--iterations", type=int, default=5000)
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    r = run_line(a.out, a.iterations)
    print(f"|d_v - t*| = {r.error:.6f}  dt = {r.dt:.6f}  abs_bound = {r.abs_bound:.4f}  v_th = {r.v_th:.4f}")
    for row in r.tracking:
        print("iter {:6d}  err {:.5f}  bound {:.5f}".format(row[0], row[1], row[2]))
