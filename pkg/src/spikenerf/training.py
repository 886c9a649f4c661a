"""Losses, schedules, Adam, checkpoints and the training loop."""
from __future__ import annotations

import json
import logging
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ContractViolation, NumericError
from .evaluation import sample_view, view_bound_stats
from .field import FieldConfig, FieldParams, density_gradient_fd, density_radiance, field_fn, init_params
from .fileio import fmt
from .neurons import NeuronKind
from .renderer import Camera, composite_nodes, sample_rays
from .scenes import DatasetManifest, SceneSpec, oracle_render_rays

log = logging.getLogger(__name__)

MAGIC = b"SNRF"
FORMAT_VERSION = 1
METRICS_HEADER = "iter,l_rgb,l_v,l_g,v_th,k,r,depth_err,abs_bound"


@dataclass
class TrainConfig:
    rays_per_batch: int = 1024
    iterations: int = 20_000
    lr: float = 5e-4
    lambda1_start: float = 0.15
    lambda1_end: float = 1.5
    lambda2_start: float = 1e-4
    lambda2_end: float = 1e-6
    warmup_iters: Optional[int] = None   # None -> 10% of iterations
    eps_v: float = 1e-3
    fd_eps: float = 1e-3
    seed: int = 0
    checkpoint_every: int = 0            # 0 -> final checkpoint only
    log_every: int = 500
    n_samples: int = 64
    stratified: bool = True
    lg_rays: int = 64                    # rays per batch that also carry L_g
    rgb_norm: str = "l2sq"               # or "l1"
    eval_views: int = 2
    extract_tau: Optional[float] = None  # threshold for ReLU baselines
    workers: int = 1

    def __post_init__(self):
        if self.warmup_iters is None:
            self.warmup_iters = self.iterations // 10
        if self.iterations > 0 and not self.warmup_iters < self.iterations:
            raise ContractViolation("warmup_iters must be < iterations")
        for name in ("lr", "lambda1_start", "lambda1_end", "lambda2_start", "lambda2_end", "eps_v", "fd_eps"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")
        if self.rgb_norm not in ("l2sq", "l1"):
            raise ContractViolation("rgb_norm must be 'l2sq' or 'l1'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ------------------------------------------------------------------- losses


def loss_rgb(pred: dc.Node, gt, norm: str = "l2sq") -> dc.Node:
    """Mean over pixels of the per-pixel residual norm (squared L2 by default)."""
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ContractViolation(f"batch size mismatch {pred.shape} vs {gt.shape}")
    res = dc.sub(pred, dc.const(gt.astype(pred.dtype)))
    per = dc.square(res) if norm == "l2sq" else dc.abs_(res)
    return dc.mul(dc.sum_(per), 1.0 / gt.shape[0])


def loss_v(v_th: dc.Node, eps_v: float = 1e-3) -> dc.Node:
    """1 / (v_th + eps_v); minimising it pushes the threshold up."""
    if np.any(v_th.value < 0):
        raise ContractViolation("v_th must be non-negative")
    return dc.div(1.0, dc.add(v_th, eps_v))


def loss_g(weights: dc.Node, ray_dirs, grad_sigma: dc.Node) -> dc.Node:
    """sum_rays sum_samples w_i * max(-d . grad sigma_i, 0).

    ``weights`` is (R, S), ``ray_dirs`` (R, 3), ``grad_sigma`` (R*S, 3).
    """
    R, S = weights.shape
    dirs = np.repeat(np.asarray(ray_dirs), S, axis=0).astype(grad_sigma.dtype)
    along = dc.sum_(dc.mul(grad_sigma, dc.const(dirs)), axis=1)
    pen = dc.reshape(dc.maximum(dc.neg(along), 0.0), (R, S))
    return dc.sum_(dc.mul(weights, pen))


def total_loss(l_rgb: dc.Node, l_v: Optional[dc.Node], l_g: Optional[dc.Node], lambda1: float, lambda2: float) -> dc.Node:
    out = l_rgb
    if l_v is not None and lambda1 != 0:
        out = dc.add(out, dc.mul(l_v, lambda1))
    if l_g is not None and lambda2 != 0:
        out = dc.add(out, dc.mul(l_g, lambda2))
    return out


def schedule(it: int, cfg: TrainConfig) -> tuple[float, float, bool]:
    """(lambda1, lambda2, v_th_frozen) at iteration ``it``.

    During warm-up the threshold stays frozen and L_v is off.  Afterwards
    lambda1 rises linearly and lambda2 decays geometrically to their end values
    at the last iteration.
    """
    if not 0 <= it < cfg.iterations:
        raise ContractViolation(f"iteration {it} outside [0, {cfg.iterations})")
    if it < cfg.warmup_iters:
        return 0.0, cfg.lambda2_start, True
    span = cfg.iterations - 1 - cfg.warmup_iters
    frac = 1.0 if span <= 0 else min(1.0, (it - cfg.warmup_iters) / span)
    lam1 = cfg.lambda1_start + frac * (cfg.lambda1_end - cfg.lambda1_start)
    lam2 = cfg.lambda2_start * (cfg.lambda2_end / cfg.lambda2_start) ** frac
    return lam1, lam2, False


# -------------------------------------------------------------------- adam


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, arrays: dict) -> "AdamState":
        return cls({n: np.zeros_like(a) for n, a in arrays.items()}, {n: np.zeros_like(a) for n, a in arrays.items()})


POSITIVE_FLOOR = 1e-3


def adam_step(params: dict, grads: dict, moments: AdamState, lr: float, frozen: Sequence[str] = ()):
    """Bias-corrected Adam over a name -> array mapping.

    Frozen names keep both value and moments.  Afterwards v_th is clamped at
    zero and k, r at a small positive floor.  A non-finite gradient aborts the
    whole step before anything changes.
    """
    if lr <= 0:
        raise ContractViolation("lr must be positive")
    for n, g in grads.items():
        if n in frozen:
            continue
        if g.shape != params[n].shape:
            raise ContractViolation(f"gradient shape mismatch for {n}")
        if not np.isfinite(g).all():
            raise NumericError(f"adam:{n}", "non-finite gradient")
    t = moments.t + 1
    b1, b2 = moments.beta1, moments.beta2
    new_p, new_m, new_v = dict(params), dict(moments.m), dict(moments.v)
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    for n, g in grads.items():
        if n in frozen:
            continue
        p = params[n]
        m = b1 * moments.m[n] + (1 - b1) * g
        v = b2 * moments.v[n] + (1 - b2) * g * g
        step = lr * (m / c1) / (np.sqrt(v / c2) + moments.eps)
        new_p[n] = (p - step).astype(p.dtype)
        new_m[n] = m.astype(p.dtype)
        new_v[n] = v.astype(p.dtype)
    if "v_th" in new_p:
        new_p["v_th"] = np.maximum(new_p["v_th"], 0).astype(new_p["v_th"].dtype)
    for n in ("k", "r"):
        if n in new_p:
            new_p[n] = np.maximum(new_p[n], POSITIVE_FLOOR).astype(new_p[n].dtype)
    return new_p, AdamState(new_m, new_v, t, b1, b2, moments.eps)


# -------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    params: FieldParams
    moments: Optional[AdamState]
    iteration: int
    rng_state: Optional[dict] = None
    train_config: Optional[dict] = None
    version: int = FORMAT_VERSION


def save_checkpoint(path, ck: Checkpoint) -> None:
    """Binary layout: magic, u32 version, u32 header length, JSON header,
    f32 parameters, then f32 Adam first and second moments (if present)."""
    names = ck.params.names()
    header = {
        "field_config": ck.params.config.to_dict(),
        "train_config": ck.train_config,
        "param_layout": [[n, list(ck.params.arrays[n].shape)] for n in names],
        "iteration": ck.iteration,
        "rng_state": ck.rng_state,
        "adam": None if ck.moments is None else {
            "t": ck.moments.t, "beta1": ck.moments.beta1, "beta2": ck.moments.beta2, "eps": ck.moments.eps},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", ck.version, len(blob)))
        f.write(blob)
        f.write(ck.params.flatten().astype("<f4").tobytes())
        if ck.moments is not None:
            for table in (ck.moments.m, ck.moments.v):
                f.write(np.concatenate([table[n].reshape(-1) for n in names]).astype("<f4").tobytes())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    config = FieldConfig(**header["field_config"])
    layout = header["param_layout"]
    count = sum(int(np.prod(s)) for _, s in layout)
    off = 12 + hlen
    flat = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float32)
    expected = {n: tuple(s) for n, s in config.layer_shapes()}
    for n, s in layout:
        if n in expected and expected[n] != tuple(s):
            raise ValueError(f"{path}: shape of {n} does not match the config")

    def unpack(vec):
        out, i = {}, 0
        for n, s in layout:
            size = int(np.prod(s))
            out[n] = vec[i:i + size].reshape(s).copy()
            i += size
        return out

    params = FieldParams(config, unpack(flat))
    moments = None
    if header["adam"] is not None:
        m = np.frombuffer(data, dtype="<f4", count=count, offset=off + 4 * count).astype(np.float32)
        v = np.frombuffer(data, dtype="<f4", count=count, offset=off + 8 * count).astype(np.float32)
        a = header["adam"]
        moments = AdamState(unpack(m), unpack(v), a["t"], a["beta1"], a["beta2"], a["eps"])
    return Checkpoint(params, moments, header["iteration"], header["rng_state"], header["train_config"], version)


# ----------------------------------------------------------------- datasets


@dataclass
class RayDataset:
    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray
    rgb: np.ndarray
    background: np.ndarray
    eval_views: list = field(default_factory=list)   # (Camera, gt depth map)

    def __len__(self):
        return len(self.origins)


def dataset_from_manifest(manifest: DatasetManifest, n_eval_views: int = 2) -> RayDataset:
    scene = manifest.scene()
    os_, ds_, ns, fs, cs, ev = [], [], [], [], [], []
    for i, (cam, rgb, depth) in enumerate(manifest.views()):
        o, d = cam.rays()
        os_.append(o)
        ds_.append(d)
        ns.append(np.full(len(o), cam.near))
        fs.append(np.full(len(o), cam.far))
        cs.append(rgb.reshape(-1, 3))
        if i < n_eval_views:
            ev.append((cam, depth))
    return RayDataset(np.concatenate(os_), np.concatenate(ds_), np.concatenate(ns), np.concatenate(fs),
                      np.concatenate(cs), np.asarray(scene.background, dtype=np.float64), ev)


def line_scene(t_star: float = 0.5, density: float = 50.0, rgb=(0.9, 0.3, 0.1)) -> SceneSpec:
    """Step density along the x axis: empty on [0, t_star), solid on [t_star, 1]."""
    from .scenes import Box

    return SceneSpec([Box((t_star, -0.05, -0.05), (1.0, 0.05, 0.05), density, rgb)], (0.0, 0.0, 0.0),
                     ((0.0, -0.05, -0.05), (1.0, 0.05, 0.05)), "line")


def line_dataset(scene: SceneSpec, n_rays: int = 1024, seed: int = 0, n_fine: int = 2048) -> RayDataset:
    """Rays along one line, truncated at varying far ends.

    A single full-length ray only constrains one colour, which any density
    profile can match.  Truncating copies of it at random far ends records
    how opacity accumulates with distance, which pins the step location.
    The evaluation view is the full ray [0, 1].
    """
    rng = np.random.default_rng(seed)
    far = np.sort(rng.uniform(0.05, 1.0, n_rays))
    far[-1] = 1.0
    origins = np.zeros((n_rays, 3))
    dirs = np.tile([1.0, 0.0, 0.0], (n_rays, 1))
    near = np.zeros(n_rays)
    rgb, _ = oracle_render_rays(scene, origins, dirs, near, far, n_fine)
    cam = line_camera()
    from .scenes import gt_depth_rays

    o, d = cam.rays()
    gt = gt_depth_rays(scene, o, d, cam.near, cam.far).reshape(1, 1)
    return RayDataset(origins, dirs, near, far, rgb, np.asarray(scene.background, dtype=np.float64), [(cam, gt)])


def line_camera() -> Camera:
    """A 1x1 camera whose single pixel is the ray from the origin along +x over [0, 1]."""
    return Camera(np.zeros(3), np.array([1.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.0]), 1.0, 1, 1, 0.0, 1.0)


# -------------------------------------------------------------------- loop


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, checkpoint_path: Optional[Path]):
        self.iteration = iteration
        self.checkpoint_path = checkpoint_path
        super().__init__(f"training diverged at iteration {iteration}; last good checkpoint: {checkpoint_path}")


@dataclass
class StepResult:
    grads: dict
    l_rgb: float
    l_v: float
    l_g: float


def batch_loss(nodes: dict, field_config: FieldConfig, ds: RayDataset, idx, t, dt, cfg: TrainConfig,
               lam1: float, lam2: float, rgb_weight: float = 1.0, n_lg: int = 0, with_v: bool = True,
               probe: Optional[list] = None):
    """Assemble the weighted training loss for rays ``idx`` sampled at ``t``.

    Returns ``(loss, l_rgb, l_v, l_g)``; the last two are ``None`` when the
    term is inactive.  ``probe`` collects every firing/ReLU mask evaluated.
    """
    o, d = ds.origins[idx], ds.dirs[idx]
    R, S = t.shape
    pts = (o[:, None, :] + t[..., None] * d[:, None, :]).reshape(-1, 3)
    dd = np.repeat(d, S, axis=0)
    out = density_radiance(pts, dd, (nodes, field_config), probe)
    ren = composite_nodes(out.sigma, out.rgb, t, dt, ds.background)
    l_rgb = loss_rgb(ren.rgb, ds.rgb[idx], cfg.rgb_norm)
    loss = dc.mul(l_rgb, rgb_weight)
    l_g = l_v = None
    if n_lg > 0 and lam2 > 0:
        grad = density_gradient_fd(pts[: n_lg * S], (nodes, field_config), cfg.fd_eps, probe)
        l_g = loss_g(dc.rows(ren.weights, 0, n_lg), d[:n_lg], grad)
        if probe is not None:
            dirs = np.repeat(d[:n_lg], S, axis=0)
            probe.append(np.sum(grad.value * dirs, axis=1) < 0)
        loss = dc.add(loss, dc.mul(l_g, lam2))
    if with_v and field_config.density_activation.kind != NeuronKind.RELU:
        l_v = loss_v(nodes["v_th"], cfg.eps_v)
        if lam1 > 0:
            loss = dc.add(loss, dc.mul(l_v, lam1))
    return loss, l_rgb, l_v, l_g


def _partition_loss(params: FieldParams, ds: RayDataset, idx, t, dt, cfg: TrainConfig, lam1, lam2, frozen,
                    rgb_weight: float, n_lg: int, with_v: bool):
    nodes = params.nodes(requires_grad=True)
    if frozen:
        nodes["v_th"].requires_grad = False
    loss, l_rgb, l_v, l_g = batch_loss(nodes, params.config, ds, idx, t, dt, cfg, lam1, lam2,
                                       rgb_weight, n_lg, with_v)
    grads = dc.backward(loss, wrt=list(nodes.values()))
    named = {n: grads[node] for n, node in nodes.items()}
    return StepResult(named, float(l_rgb.value),
                      0.0 if l_v is None else float(l_v.value), 0.0 if l_g is None else float(l_g.value))


def train_step(params: FieldParams, ds: RayDataset, cfg: TrainConfig, it: int, rng: np.random.Generator,
               pool: Optional[ThreadPoolExecutor] = None) -> StepResult:
    """Loss and gradients for one batch, merged over worker partitions in fixed order."""
    lam1, lam2, frozen = schedule(it, cfg)
    R = cfg.rays_per_batch
    idx = rng.integers(0, len(ds), R)
    t, dt = sample_rays(ds.near[idx], ds.far[idx], cfg.n_samples, cfg.stratified, rng)
    W = max(1, min(cfg.workers, R))
    bounds = np.linspace(0, R, W + 1).astype(int)
    lg_total = min(cfg.lg_rays, R)
    jobs = []
    for p in range(W):
        lo, hi = bounds[p], bounds[p + 1]
        n_lg = int(round(lg_total * (hi - lo) / R))
        jobs.append((params, ds, idx[lo:hi], t[lo:hi], dt[lo:hi], cfg, lam1, lam2, frozen,
                     (hi - lo) / R, min(n_lg, hi - lo), p == 0))
    if pool is not None and W > 1:
        results = list(pool.map(lambda a: _partition_loss(*a), jobs))
    else:
        results = [_partition_loss(*a) for a in jobs]
    grads = {n: sum(r.grads[n] for r in results[1:]) + results[0].grads[n] if len(results) > 1 else results[0].grads[n]
             for n in results[0].grads}
    weights = [(hi - lo) / R for lo, hi in zip(bounds[:-1], bounds[1:])]
    l_rgb = sum(w * r.l_rgb for w, r in zip(weights, results))
    return StepResult(grads, l_rgb, results[0].l_v, sum(r.l_g for r in results))


def evaluate_views(params: FieldParams, views, n_samples: int, tau: Optional[float] = None) -> tuple[float, float]:
    """Mean foreground depth error and mean abs_bound over the evaluation views."""
    if not views:
        return float("nan"), float("nan")
    fn = field_fn(params, np.float64)
    v_th = params.neuron().v_th
    errs, bounds = [], []
    for cam, gt in views:
        vs = sample_view(cam, fn, gt, n_samples)
        e, b = view_bound_stats(vs, v_th, tau)
        errs.append(e)
        bounds.append(b)
    e = float(np.nanmean(errs)) if not np.all(np.isnan(errs)) else float("nan")
    b = float(np.nanmean(bounds)) if not np.all(np.isnan(bounds)) else float("nan")
    return e, b


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    metrics: list
    checkpoint_paths: list


def train_loop(data, cfg: TrainConfig, field_config: FieldConfig, out_dir=None,
               init: Optional[Checkpoint] = None) -> TrainResult:
    """Train a field on a :class:`RayDataset` (or a manifest) and log metrics.

    Writes ``metrics.csv`` and checkpoints into ``out_dir`` when given.  On a
    non-finite loss or gradient the loop stops and raises
    :class:`TrainingDiverged` after saving the last good state.
    """
    ds = data if isinstance(data, RayDataset) else dataset_from_manifest(data, cfg.eval_views)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    if init is not None:
        params, moments, start = init.params, init.moments, init.iteration
        if init.rng_state is not None:
            rng.bit_generator.state = init.rng_state
    else:
        params = init_params(field_config)
        moments, start = None, 0
    moments = moments or AdamState.zeros_like(params.arrays)
    metrics, paths = [], []
    tau = cfg.extract_tau

    def snapshot(it) -> Checkpoint:
        return Checkpoint(params.copy(), moments, it, rng.bit_generator.state, cfg.to_dict())

    def save(ck: Checkpoint, name: str):
        if out is None:
            return None
        p = out / name
        save_checkpoint(p, ck)
        paths.append(p)
        return p

    def log_row(it, step: Optional[StepResult]):
        err, bnd = evaluate_views(params, ds.eval_views, cfg.n_samples, tau)
        nrn = params.neuron()
        row = (it, step.l_rgb if step else float("nan"), step.l_v if step else float("nan"),
               step.l_g if step else float("nan"), nrn.v_th, nrn.k, nrn.r, err, bnd)
        metrics.append(row)
        log.info("iter %d  l_rgb %.5f  v_th %.3f  depth_err %.4f  bound %.4f", it, row[1], nrn.v_th, err, bnd)

    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    last_good = None
    try:
        if cfg.checkpoint_every and start == 0:
            last_good = save(snapshot(0), "ckpt_000000.snrf")
        for it in range(start, cfg.iterations):
            _, _, frozen = schedule(it, cfg)
            try:
                step = train_step(params, ds, cfg, it, rng, pool)
                if not math.isfinite(step.l_rgb + step.l_v + step.l_g):
                    raise NumericError("loss")
                new_arrays, moments = adam_step(params.arrays, step.grads, moments, cfg.lr,
                                                frozen=("v_th",) if frozen else ())
            except NumericError as e:
                log.error("diverged at iteration %d: %s", it, e)
                path = save(snapshot(it), "ckpt_last_good.snrf")
                raise TrainingDiverged(it, path or last_good) from e
            params = FieldParams(params.config, new_arrays)
            done = it + 1
            if cfg.log_every and (done % cfg.log_every == 0 or done == cfg.iterations):
                log_row(done, step)
            if cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                last_good = save(snapshot(done), f"ckpt_{done:06d}.snrf")
    finally:
        if pool is not None:
            pool.shutdown()
    final = snapshot(cfg.iterations if cfg.iterations > start else start)
    save(final, "final.snrf")
    if out is not None:
        write_metrics(out / "metrics.csv", metrics)
    return TrainResult(final, metrics, paths)


def write_metrics(path, rows) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(METRICS_HEADER + "\n")
        for row in rows:
            f.write(",".join(fmt(v) for v in row) + "\n")
