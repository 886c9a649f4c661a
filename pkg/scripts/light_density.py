"""B-FIF vs a ReLU baseline (best global threshold) on light-density scenes."""
import argparse
import logging

from spikenerf.experiments import run_light

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/light")
    ap.add_argument("--scenes", nargs="+", default=["thin-sheet", "semi-slab"])
    ap.add_argument("--iterations", type=int, default=20000)
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    for scene in a.scenes:
        for kind in ("bfif", "relu"):
            r = run_light(scene, kind, f"{a.out}/{scene}/data", f"{a.out}/{scene}/{kind}", a.iterations)
            print(f"{scene:12s} {kind:5s} error {r.mean_error:.4f}  tau {r.tau}  "
                  f"misses {r.misses}  false surfaces {r.false_surfaces}")
