"""Depth-error maps, Chamfer distance, threshold sweeps and bound tracking."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .diffcore import ContractViolation
from .renderer import Camera, bound_rays, extract_depth_rays, render_rays, RenderSettings


@dataclass
class DepthErrorMap:
    errors: np.ndarray     # NaN wherever either map is background
    mean: float            # NaN when no pixel is foreground in both
    max: float
    foreground: int        # pixels foreground in both maps
    misses: int            # GT surface, no predicted surface
    false_surfaces: int    # predicted surface over GT background


def depth_error_map(pred, gt) -> DepthErrorMap:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractViolation(f"resolution mismatch {pred.shape} vs {gt.shape}")
    pf, gf = ~np.isnan(pred), ~np.isnan(gt)
    both = pf & gf
    err = np.where(both, np.abs(pred - gt), np.nan)
    n = int(both.sum())
    mean = float(err[both].mean()) if n else float("nan")
    mx = float(err[both].max()) if n else float("nan")
    return DepthErrorMap(err, mean, mx, n, int((gf & ~pf).sum()), int((pf & ~gf).sum()))


def backproject(depth, camera: Camera) -> np.ndarray:
    """One point per foreground pixel at origin + depth * direction."""
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    origins, dirs = camera.rays()
    fg = ~np.isnan(depth)
    return origins[fg] + depth[fg, None] * dirs[fg]


@dataclass
class ChamferResult:
    value: float
    a_to_b: float
    b_to_a: float
    n_a: int
    n_b: int


def _nn_dist_brute(a, b, chunk=2048):
    out = np.empty(len(a))
    for s in range(0, len(a), chunk):
        diff = a[s:s + chunk, None, :] - b[None, :, :]
        out[s:s + chunk] = np.sqrt((diff * diff).sum(axis=-1).min(axis=1))
    return out


def _nn_dist_kdtree(a, b):
    from scipy.spatial import cKDTree

    _, idx = cKDTree(b).query(a)
    # recompute with the brute-force expression so both paths agree bitwise
    diff = a - b[idx]
    return np.sqrt((diff * diff).sum(axis=-1))


def chamfer(a, b, method: str = "brute") -> ChamferResult:
    """Symmetric Chamfer distance: mean of the two mean nearest-neighbour distances."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ContractViolation("chamfer needs non-empty point sets")
    nn = _nn_dist_brute if method == "brute" else _nn_dist_kdtree
    ab = float(nn(a, b).mean())
    ba = float(nn(b, a).mean())
    return ChamferResult((ab + ba) / 2, ab, ba, len(a), len(b))


def sphere_surface_samples(center, radius, n: int, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return np.asarray(center, dtype=np.float64) + radius * v


# --------------------------------------------------------- view evaluation


@dataclass
class ViewSamples:
    """Deterministic samples of one view, reusable across thresholds."""

    camera: Camera
    t: np.ndarray
    dt: np.ndarray
    sigma: np.ndarray
    gt_depth: np.ndarray


def sample_view(camera: Camera, field_fn: Callable, gt_depth, n_samples: int = 64, chunk: int = 4096) -> ViewSamples:
    origins, dirs = camera.rays()
    settings = RenderSettings(n_samples=n_samples)
    ts, dts, sigs = [], [], []
    for s in range(0, len(origins), chunk):
        sl = slice(s, s + chunk)
        t, dt, sigma, _ = render_rays(origins[sl], dirs[sl], camera.near, camera.far, field_fn, settings)
        ts.append(t)
        dts.append(dt)
        sigs.append(sigma)
    return ViewSamples(camera, np.concatenate(ts), np.concatenate(dts), np.concatenate(sigs),
                       np.asarray(gt_depth, dtype=np.float64).reshape(-1))


def view_depth(vs: ViewSamples, tau: Optional[float] = None) -> np.ndarray:
    mode = "first_nonzero" if tau is None else "threshold"
    d = extract_depth_rays(vs.t, vs.sigma, mode, tau)
    return d.reshape(vs.camera.height, vs.camera.width)


@dataclass
class SweepResult:
    taus: np.ndarray
    errors: np.ndarray          # (views, taus) mean depth error; NaN if no overlap
    best_tau: np.ndarray        # per view
    best_error: np.ndarray
    spread: float               # max - min of the per-view optimal tau
    global_errors: np.ndarray   # mean over views at each tau
    best_global_tau: float
    best_global_error: float


def threshold_sweep(views: Sequence[ViewSamples], taus: Optional[Sequence[float]]) -> SweepResult:
    """Mean depth error per view and threshold.

    With ``taus=None`` the field is threshold-free (spiking density) and the
    sweep has a single row extracted at the first non-zero density.
    """
    if taus is None:
        grid = [None]
    else:
        grid = list(taus)
        if any(t <= 0 for t in grid) or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ContractViolation("taus must be positive and ascending")
    errors = np.full((len(views), len(grid)), np.nan)
    for vi, vs in enumerate(views):
        gt = vs.gt_depth.reshape(vs.camera.height, vs.camera.width)
        for ti, tau in enumerate(grid):
            errors[vi, ti] = depth_error_map(view_depth(vs, tau), gt).mean
    filled = np.where(np.isnan(errors), np.inf, errors)
    best_idx = filled.argmin(axis=1)
    tau_arr = np.array([np.nan if t is None else t for t in grid])
    best_tau = tau_arr[best_idx]
    best_err = filled[np.arange(len(views)), best_idx]
    with np.errstate(invalid="ignore"):
        glob = np.where(np.isnan(errors).any(axis=0), np.inf, errors.mean(axis=0))
    gi = int(np.argmin(glob))
    spread = float(np.nanmax(best_tau) - np.nanmin(best_tau)) if taus is not None else 0.0
    return SweepResult(tau_arr, errors, best_tau, best_err, spread, glob, float(tau_arr[gi]), float(glob[gi]))


def view_bound_stats(vs: ViewSamples, v_th: float, tau: Optional[float] = None) -> tuple[float, float]:
    """(mean foreground depth error, mean abs_bound over rays with a fired sample)."""
    d = view_depth(vs, tau)
    err = depth_error_map(d, vs.gt_depth.reshape(d.shape)).mean
    b = bound_rays(vs.t, vs.dt, vs.sigma, v_th, vs.camera.far)
    ab = b["abs_bound"]
    return err, float(np.nanmean(ab)) if np.any(~np.isnan(ab)) else float("nan")


BOUND_TRACK_HEADER = "iter,depth_err,abs_bound,v_th,v_max"


def bound_tracking(checkpoints: Sequence, views: Sequence, n_samples: int = 64):
    """Evaluate error and bound for each checkpoint.

    ``checkpoints`` are :class:`~spikenerf.training.Checkpoint` objects or
    paths; ``views`` are (camera, gt depth map) pairs.  Returns CSV-ready rows
    ``(iter, mean depth error, mean abs_bound, v_th, mean v_max)``.
    """
    from .field import field_fn
    from .training import Checkpoint, load_checkpoint

    if len(checkpoints) < 2:
        raise ContractViolation("bound tracking needs at least two checkpoints")
    rows = []
    for ck in checkpoints:
        ck = ck if isinstance(ck, Checkpoint) else load_checkpoint(ck)
        fn = field_fn(ck.params, np.float64)
        v_th = ck.params.neuron().v_th
        errs, bounds, vmax = [], [], []
        for cam, gt in views:
            vs = sample_view(cam, fn, gt, n_samples)
            e, b = view_bound_stats(vs, v_th)
            errs.append(e)
            bounds.append(b)
            vmax.append(np.nanmean(bound_rays(vs.t, vs.dt, vs.sigma, v_th, cam.far)["v_max"]))
        rows.append((ck.iteration, float(np.nanmean(errs)) if not np.all(np.isnan(errs)) else float("nan"),
                     float(np.nanmean(bounds)) if not np.all(np.isnan(bounds)) else float("nan"),
                     v_th, float(np.nanmean(vmax)) if not np.all(np.isnan(vmax)) else float("nan")))
    return rows
