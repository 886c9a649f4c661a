"""Command-line entry point: ``spikenerf <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .diffcore import ContractViolation
from .evaluation import backproject, chamfer, sample_view, threshold_sweep, view_depth, depth_error_map
from .field import FieldConfig, field_fn
from .fileio import fmt, read_json, write_csv, write_json, write_pfm, write_ply, write_ppm
from .neurons import NeuronKind
from .renderer import (
    BOUND_CSV_HEADER, Camera, RaySampleBatch, RenderSettings, bound_csv_rows, bound_rays, bound_report,
    render_image,
)
from .scenes import DatasetManifest, generate_dataset, load_scene, orbit_cameras
from .training import TrainConfig, load_checkpoint, train_loop

log = logging.getLogger("spikenerf")

RANDOM_BOUND_HEADER = "trial,n,m,v_th,v_max,t_range,d_int,d_ext,lower,upper,violation"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


# ------------------------------------------------------------ bound oracle


def bound_trial(rng: np.random.Generator):
    """One randomized ray for the two-sided bound check.

    Samples sit at stratum centres of random widths in [0.002, 0.02]; the first
    fired sample ``m`` has density v_th, densities after it lie in [0, v_max]
    with v_max >= v_th, and the range end is the far edge of the last stratum.
    ``m`` always has at least one successor.
    """
    n = int(rng.integers(16, 257))
    dt = rng.uniform(0.002, 0.02, n)
    edges = np.concatenate([[0.0], np.cumsum(dt)])
    t = edges[:-1] + dt / 2
    m = int(rng.integers(0, n - 1))
    v_th = float(rng.uniform(0.5, 50.0))
    v_max = float(rng.uniform(v_th, 50.0))
    sigma = np.zeros(n)
    sigma[m] = v_th
    sigma[m + 1:] = rng.uniform(0.0, v_max, n - m - 1)
    if rng.random() < 0.05:
        sigma[m + 1:] = 0.0   # exercises the all-zero-successor path
    return RaySampleBatch(t, dt, sigma, far=float(edges[-1])), v_th


def bound_check_random(n: int, seed: int) -> list[tuple]:
    """Rows of :data:`RANDOM_BOUND_HEADER`, one per trial."""
    if n < 1:
        raise ContractViolation("n must be >= 1")
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n):
        batch, v_th = bound_trial(rng)
        r = bound_report(batch, v_th)
        rows.append((i, len(batch.t), r.m, r.v_th, r.v_max, r.t_range, r.d_integrated, r.d_extracted,
                     r.lower, r.upper, int(not r.holds)))
    return rows


# ---------------------------------------------------------------- helpers


def _echo(cfg: dict, sidecar: Path) -> None:
    text = json.dumps(cfg, indent=2, sort_keys=True, default=str)
    print(text)
    sidecar.parent.mkdir(parents=True, exist_ok=True)
    sidecar.write_text(text + "\n")


def _parse_res(s: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in s.lower().split("x"))
    except ValueError:
        raise UsageError(f"bad --res {s!r}; expected WxH") from None
    return w, h


def _parse_sweep(s: str) -> list[float]:
    try:
        a, b, n = s.split(":")
        return list(np.linspace(float(a), float(b), int(n)))
    except ValueError:
        raise UsageError(f"bad --sweep {s!r}; expected t0:t1:steps") from None


def _load_cameras(path) -> list[Camera]:
    d = read_json(path)
    if isinstance(d, dict) and "cameras" in d:
        d = d["cameras"]
    if isinstance(d, dict):
        d = [d]
    return [Camera.from_dict(c) for c in d]


def _is_relu(ck) -> bool:
    return ck.params.config.density_activation.kind == NeuronKind.RELU


# ---------------------------------------------------------------- commands


def cmd_gen_scene(a) -> int:
    scene = load_scene(a.scene)
    w, h = _parse_res(a.res)
    cfg = {"command": "gen-scene", "scene": a.scene, "out": a.out, "views": a.views, "res": a.res,
           "seed": a.seed, "n_fine": a.n_fine, "radius": a.radius}
    out = Path(a.out)
    _echo(cfg, out / "gen-scene.config.json")
    cams = orbit_cameras(a.views, a.radius, w, h, seed=a.seed)
    generate_dataset(scene, cams, a.n_fine, out, a.seed)
    return 0


def cmd_train(a) -> int:
    raw = read_json(a.config) if a.config else {}
    train = TrainConfig.from_dict({**raw.get("train", {}), **({"workers": a.workers} if a.workers else {})})
    fcfg = FieldConfig(**raw.get("field", {}))
    out = Path(a.out)
    cfg = {"command": "train", "data": a.data, "out": a.out, "train": train.to_dict(), "field": fcfg.to_dict()}
    _echo(cfg, out / "train.config.json")
    manifest = DatasetManifest.load(a.data)
    train_loop(manifest, train, fcfg, out)
    return 0


def cmd_render(a) -> int:
    ck = load_checkpoint(a.ckpt)
    cams = _load_cameras(a.camera)
    settings = RenderSettings(n_samples=a.samples, workers=a.workers, background=tuple(a.background))
    cfg = {"command": "render", "ckpt": a.ckpt, "camera": a.camera, "out": a.out, "samples": a.samples,
           "workers": a.workers, "background": list(settings.background)}
    out = Path(a.out)
    _echo(cfg, out / "render.config.json")
    fn = field_fn(ck.params, np.float64)
    v_th = ck.params.neuron().v_th
    for i, cam in enumerate(cams):
        res = render_image(cam, fn, settings, v_th)
        write_ppm(out / f"rgb_{i:03d}.ppm", res.rgb)
        write_pfm(out / f"depth_{i:03d}.pfm", res.depth_extracted)
        write_pfm(out / f"depth_int_{i:03d}.pfm", res.depth_integrated)
        write_csv(out / f"bounds_{i:03d}.csv", BOUND_CSV_HEADER, bound_csv_rows(res.bounds))
    return 0


def cmd_eval(a) -> int:
    ck = load_checkpoint(a.ckpt)
    manifest = DatasetManifest.load(a.data)
    taus = _parse_sweep(a.sweep) if a.sweep else None
    relu = a.baseline == "relu" or _is_relu(ck)
    cfg = {"command": "eval", "ckpt": a.ckpt, "data": a.data, "out": a.out, "sweep": a.sweep,
           "baseline": a.baseline, "samples": a.samples, "tau": a.tau}
    out = Path(a.out)
    _echo(cfg, out / "eval.config.json")
    fn = field_fn(ck.params, np.float64)
    views = [sample_view(cam, fn, gt, a.samples) for cam, _, gt in manifest.views()]
    tau = a.tau if relu else None
    if relu and tau is None:
        if taus is None:
            raise UsageError("a ReLU baseline needs --tau or --sweep")
        tau = threshold_sweep(views, taus).best_global_tau
    rows, pred_pts, gt_pts = [], [], []
    for i, vs in enumerate(views):
        d = view_depth(vs, tau)
        gt = vs.gt_depth.reshape(d.shape)
        em = depth_error_map(d, gt)
        rows.append((i, em.mean, em.max, em.foreground, em.misses, em.false_surfaces))
        pred_pts.append(backproject(d, vs.camera))
        gt_pts.append(backproject(gt, vs.camera))
    write_csv(out / "depth_errors.csv", "view,mean,max,foreground,misses,false_surfaces", rows)
    pred, gtp = np.concatenate(pred_pts), np.concatenate(gt_pts)
    cd = chamfer(pred, gtp, method="kdtree") if len(pred) else None
    means = [r[1] for r in rows if not np.isnan(r[1])]
    summary = {"mean_depth_error": float(np.mean(means)) if means else None, "tau": tau,
               "chamfer": None if cd is None else cd.value, "points": len(pred)}
    write_json(out / "summary.json", summary)
    if taus is not None:
        sw = threshold_sweep(views, taus if relu else None)
        srows = [(fmt(t),) + tuple(fmt(e) for e in sw.errors[:, j]) for j, t in enumerate(sw.taus)]
        header = "tau," + ",".join(f"view_{i}" for i in range(len(views)))
        write_csv(out / "sweep.csv", header, [",".join(r) for r in srows])
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_bound_check(a) -> int:
    out = Path(a.out)
    if a.random is not None:
        cfg = {"command": "bound-check", "random": a.random, "seed": a.seed, "out": a.out}
        _echo(cfg, out.with_name(out.name + ".config.json"))
        rows = bound_check_random(a.random, a.seed)
        write_csv(out, RANDOM_BOUND_HEADER, rows)
        bad = sum(r[-1] for r in rows)
        print(f"{len(rows)} trials, {bad} violations")
        return 0
    if not (a.ckpt and a.data):
        raise UsageError("bound-check needs --random N or both --ckpt and --data")
    cfg = {"command": "bound-check", "ckpt": a.ckpt, "data": a.data, "out": a.out, "samples": a.samples}
    _echo(cfg, out.with_name(out.name + ".config.json"))
    ck = load_checkpoint(a.ckpt)
    fn = field_fn(ck.params, np.float64)
    v_th = ck.params.neuron().v_th
    lines, offset = [], 0
    for cam, _, gt in DatasetManifest.load(a.data).views():
        vs = sample_view(cam, fn, gt, a.samples)
        b = bound_rays(vs.t, vs.dt, vs.sigma, v_th, cam.far)
        n = len(vs.t)
        lines += bound_csv_rows(b, range(offset, offset + n))
        offset += n
    write_csv(out, BOUND_CSV_HEADER, lines)
    return 0


def cmd_export(a) -> int:
    ck = load_checkpoint(a.ckpt)
    cams = _load_cameras(a.views)
    cfg = {"command": "export", "ckpt": a.ckpt, "views": a.views, "ply": a.ply, "samples": a.samples, "tau": a.tau}
    ply = Path(a.ply)
    _echo(cfg, ply.with_name(ply.name + ".config.json"))
    fn = field_fn(ck.params, np.float64)
    if _is_relu(ck) and a.tau is None:
        raise UsageError("exporting a ReLU baseline needs --tau")
    pts = []
    for cam in cams:
        vs = sample_view(cam, fn, np.full(cam.width * cam.height, np.nan), a.samples)
        pts.append(backproject(view_depth(vs, a.tau), cam))
    write_ply(ply, np.concatenate(pts) if pts else np.zeros((0, 3)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="spikenerf", description="Spiking-density radiance fields at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-scene", help="render a ground-truth dataset for a scene")
    g.add_argument("--scene", required=True, help="built-in name or scene JSON file")
    g.add_argument("--out", required=True)
    g.add_argument("--views", type=int, default=16)
    g.add_argument("--res", default="64x64", help="WxH")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n-fine", type=int, default=1024, help="oracle quadrature samples per ray")
    g.add_argument("--radius", type=float, default=2.0, help="camera orbit radius")
    g.set_defaults(fn=cmd_gen_scene)

    t = sub.add_parser("train", help="train a field on a dataset manifest")
    t.add_argument("--data", required=True, help="manifest.json")
    t.add_argument("--config", help='JSON with optional "train" and "field" blocks')
    t.add_argument("--out", required=True)
    t.add_argument("--workers", type=int, default=0, help="override the configured worker count")
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("render", help="render RGB, depth and bounds from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--camera", required=True, help="camera JSON (object, list, or manifest)")
    r.add_argument("--out", required=True)
    r.add_argument("--samples", type=int, default=64)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--background", type=float, nargs=3, default=[1.0, 1.0, 1.0])
    r.set_defaults(fn=cmd_render)

    e = sub.add_parser("eval", help="depth error, Chamfer distance and threshold sweeps")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--sweep", help="t0:t1:steps threshold grid")
    e.add_argument("--baseline", choices=["relu"], help="treat the checkpoint as a thresholded baseline")
    e.add_argument("--tau", type=float, help="fixed extraction threshold for a baseline")
    e.add_argument("--samples", type=int, default=64)
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bound-check", help="check the two-sided depth bound")
    b.add_argument("--random", type=int, help="number of randomized oracle trials")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--ckpt")
    b.add_argument("--data")
    b.add_argument("--samples", type=int, default=64)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_bound_check)

    x = sub.add_parser("export", help="back-project extracted depth to a PLY point cloud")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--views", required=True, help="camera JSON list")
    x.add_argument("--ply", required=True)
    x.add_argument("--samples", type=int, default=64)
    x.add_argument("--tau", type=float)
    x.set_defaults(fn=cmd_export)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - any failure maps to the runtime exit code
        print(f"spikenerf {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
