"""Ray sampling, volume-rendering quadrature, depth extraction and the depth-error bound.

Conventions
-----------
* ``t`` is distance from the ray origin along a unit direction.
* Each sample owns one stratum of ``[near, far]`` and ``dt`` is the stratum
  width, so ``sum(dt) == far - near``.
* The bound's range length ``T`` is ``far``: the light starts at the ray
  origin and the range end lies beyond the last sample.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import diffcore as dc
from .diffcore import ContractViolation


class NoSurfaceError(ValueError):
    pass


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        if not self.near < self.far:
            raise ContractViolation("near must be < far")
        if abs(np.linalg.norm(self.direction) - 1) > 1e-6:
            raise ContractViolation("ray direction must be unit length")

    @property
    def length(self) -> float:
        return self.far - self.near


@dataclass
class RaySampleBatch:
    """Samples along one ray (1-D arrays) or many rays (2-D, one row per ray)."""

    t: np.ndarray
    dt: np.ndarray
    sigma: np.ndarray
    color: Optional[np.ndarray] = None
    far: Optional[np.ndarray | float] = None
    weights: Optional[np.ndarray] = None
    transmittance: Optional[np.ndarray] = None


# ------------------------------------------------------------------ sampling


def sample_ray(ray: Ray, n: int, stratified: bool = False, seed=None):
    """Sample positions and stratum widths on one ray."""
    t, dt = sample_rays(np.array([ray.near]), np.array([ray.far]), n, stratified, seed)
    return t[0], dt[0]


def sample_rays(near, far, n: int, stratified: bool = False, rng=None):
    """Vectorised :func:`sample_ray` over R rays -> (R, n) arrays.

    Deterministic mode puts samples at stratum centres; stratified mode jitters
    uniformly inside each stratum.  ``rng`` may be a Generator or a seed.
    """
    if n < 2:
        raise ContractViolation("need at least 2 samples per ray")
    near = np.asarray(near, dtype=np.float64).reshape(-1, 1)
    far = np.asarray(far, dtype=np.float64).reshape(-1, 1)
    if np.any(near >= far):
        raise ContractViolation("near must be < far")
    width = (far - near) / n
    idx = np.arange(n, dtype=np.float64)[None, :]
    if stratified:
        gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        u = gen.random((near.shape[0], n))
    else:
        u = 0.5
    t = near + (idx + u) * width
    dt = np.broadcast_to(width, t.shape).copy()
    return t, dt


# ------------------------------------------------------------- compositing


def composite(batch: RaySampleBatch, background=None):
    """Numpy quadrature.

    Returns ``(color, d_integrated, weights, transmittance)``; color is
    ``sum w_i c_i`` plus ``(1 - sum w) * background`` when a background is given.
    """
    sigma = np.asarray(batch.sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise ContractViolation("negative density")
    single = sigma.ndim == 1
    sigma2 = np.atleast_2d(sigma)
    t = np.atleast_2d(batch.t)
    dt = np.atleast_2d(batch.dt)
    tau = sigma2 * dt
    cum = np.zeros_like(tau)
    np.cumsum(tau[:, :-1], axis=1, out=cum[:, 1:])
    trans = np.exp(-cum)
    alpha = -np.expm1(-tau)
    w = trans * alpha
    depth = (w * t).sum(axis=1)
    color = None
    if batch.color is not None:
        c = np.asarray(batch.color, dtype=np.float64)
        c = c.reshape(sigma2.shape + (c.shape[-1],))
        color = (w[..., None] * c).sum(axis=1)
        if background is not None:
            color = color + (1 - w.sum(axis=1))[:, None] * np.asarray(background, dtype=np.float64)
    elif background is not None:
        color = (1 - w.sum(axis=1))[:, None] * np.asarray(background, dtype=np.float64)
    batch.weights = w[0] if single else w
    batch.transmittance = trans[0] if single else trans
    if single:
        return (None if color is None else color[0]), float(depth[0]), w[0], trans[0]
    return color, depth, w, trans


def weight_identity_residual(batch: RaySampleBatch) -> np.ndarray:
    """|sum w - (1 - prod beta)| per ray."""
    _, _, w, _ = composite(batch)
    w = np.atleast_2d(w)
    beta = np.exp(-np.atleast_2d(batch.sigma) * np.atleast_2d(batch.dt))
    return np.abs(w.sum(axis=1) - (1 - beta.prod(axis=1)))


@dataclass
class RenderNodes:
    rgb: dc.Node          # (R, 3)
    weights: dc.Node      # (R, S)
    depth: dc.Node        # (R,)
    acc: dc.Node          # (R,)


def composite_nodes(sigma: dc.Node, rgb: dc.Node, t: np.ndarray, dt: np.ndarray, background=None) -> RenderNodes:
    """On-tape quadrature for R rays x S samples.

    ``sigma`` is (R*S,) and ``rgb`` is (R*S, 3) in ray-major order.
    """
    R, S = t.shape
    dtype = sigma.dtype
    sig = dc.reshape(sigma, (R, S))
    tau = dc.mul(sig, dc.const(dt.astype(dtype)))
    trans = dc.exp(dc.neg(dc.exclusive_cumsum(tau)))
    alpha = dc.sub(1.0, dc.exp(dc.neg(tau)))
    w = dc.mul(trans, alpha)
    acc = dc.sum_(w, axis=1)
    depth = dc.sum_(dc.mul(w, dc.const(t.astype(dtype))), axis=1)
    chans = []
    for ch in range(3):
        c = dc.reshape(dc.cols(rgb, ch), (R, S))
        col = dc.sum_(dc.mul(w, c), axis=1)
        if background is not None:
            col = dc.add(col, dc.mul(dc.sub(1.0, acc), float(background[ch])))
        chans.append(col)
    return RenderNodes(dc.concat_cols(chans), w, depth, acc)


# ---------------------------------------------------------- depth extraction


def extract_depth(batch: RaySampleBatch, mode="first_nonzero", tau: float | None = None):
    """Distance to the first qualifying sample, or None if the ray escapes.

    ``mode`` is ``"first_nonzero"`` (sigma > 0) or ``"threshold"`` (sigma >= tau).
    """
    sigma = np.asarray(batch.sigma)
    out = extract_depth_rays(np.atleast_2d(batch.t), np.atleast_2d(sigma), mode, tau)
    if sigma.ndim == 1:
        return None if np.isnan(out[0]) else float(out[0])
    return out


def extract_depth_rays(t, sigma, mode="first_nonzero", tau=None) -> np.ndarray:
    """Vectorised extraction; escaped rays get NaN."""
    if mode == "first_nonzero":
        hit = sigma > 0
    elif mode == "threshold":
        if tau is None:
            raise ContractViolation("threshold mode needs tau")
        hit = sigma >= tau
    else:
        raise ContractViolation(f"unknown extraction mode {mode!r}")
    any_hit = hit.any(axis=1)
    idx = hit.argmax(axis=1)
    d = np.take_along_axis(t, idx[:, None], axis=1)[:, 0]
    return np.where(any_hit, d, np.nan)


# -------------------------------------------------------------- depth bound


def bound_terms(v_th, v_max, dt_m, dt_m1, dt_mp, t_range):
    """Lower and upper ends of the two-sided depth-error bound.

    lower = (dt_{m+1} - T exp(-v_max dt_{m'})) exp(-v_th dt_m)
    upper = T (1 - exp(-v_max T)) exp(-v_th dt_m)
    """
    shared = np.exp(-np.asarray(v_th) * dt_m)
    lower = (dt_m1 - t_range * np.exp(-np.asarray(v_max) * dt_mp)) * shared
    upper = t_range * (-np.expm1(-np.asarray(v_max) * t_range)) * shared
    return lower, upper


def scalar_bound(v_th: float, v_max: float, dt: float, t_range: float) -> float:
    """The single-Delta-t reporting form, max(|lower|, |upper|)."""
    lo, up = bound_terms(v_th, v_max, dt, dt, dt, t_range)
    return float(max(abs(lo), abs(up)))


@dataclass
class BoundReport:
    v_th: float
    v_max: float
    dt_m: float
    dt_m1: float
    dt_mp: float
    t_range: float
    lower: float
    upper: float
    abs_bound: float
    d_integrated: float
    d_extracted: float
    m: int = 0
    m_prime: int = 0
    degenerate: bool = False

    @property
    def holds(self) -> bool:
        diff = self.d_integrated - self.d_extracted
        return self.lower < diff < self.upper


def bound_report(batch: RaySampleBatch, v_th: float) -> BoundReport:
    """Per-ray bound quantities with exact per-index intervals.

    ``m`` is the first sample with sigma > 0 and ``m'`` the largest density
    after it.  ``dt_m1`` is the spacing ``t[m+1] - t[m]``.  Silent successors
    give v_max = 0, which keeps the two-sided inequality valid (the upper end
    collapses to 0).  When ``m`` is the last sample the successor set is
    empty: v_max falls back to sigma_m, the spacing to the range end, and the
    report is flagged degenerate.
    """
    sigma = np.asarray(batch.sigma, dtype=np.float64)
    t = np.asarray(batch.t, dtype=np.float64)
    dt = np.asarray(batch.dt, dtype=np.float64)
    fired = np.flatnonzero(sigma > 0)
    if fired.size == 0:
        raise NoSurfaceError("no fired sample on this ray")
    far = float(batch.far) if batch.far is not None else float(t[-1] + dt[-1] / 2)
    m = int(fired[0])
    n = sigma.size
    _, d_int, _, _ = composite(RaySampleBatch(t, dt, sigma))
    if m < n - 1:
        succ = sigma[m + 1:]
        mp = m + 1 + int(np.argmax(succ))
        v_max = float(succ.max())
        dt_m1 = float(t[m + 1] - t[m])
        degenerate = False
    else:
        mp, v_max, dt_m1, degenerate = m, float(sigma[m]), far - float(t[m]), True
    lower, upper = bound_terms(v_th, v_max, dt[m], dt_m1, dt[mp], far)
    return BoundReport(
        v_th=float(v_th), v_max=v_max, dt_m=float(dt[m]), dt_m1=dt_m1, dt_mp=float(dt[mp]),
        t_range=far, lower=float(lower), upper=float(upper), abs_bound=float(max(abs(lower), abs(upper))),
        d_integrated=d_int, d_extracted=float(t[m]), m=m, m_prime=mp, degenerate=degenerate,
    )


def bound_rays(t, dt, sigma, v_th: float, far) -> dict[str, np.ndarray]:
    """Vectorised bound over rays (R, S).  Rays with no fired sample get NaN."""
    t = np.asarray(t, dtype=np.float64)
    dt = np.asarray(dt, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    R, S = sigma.shape
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (R,))
    fired = sigma > 0
    hit = fired.any(axis=1)
    m = fired.argmax(axis=1)
    rows = np.arange(R)
    col = np.arange(S)[None, :]
    succ = np.where(col > m[:, None], sigma, -np.inf)
    has_succ = m < S - 1
    mp = np.where(has_succ, succ.argmax(axis=1), m)
    v_max = sigma[rows, mp]
    m1 = np.minimum(m + 1, S - 1)
    dt_m1 = np.where(has_succ, t[rows, m1] - t[rows, m], far - t[rows, m])
    dt_m = dt[rows, m]
    dt_mp = dt[rows, mp]
    lower, upper = bound_terms(v_th, v_max, dt_m, dt_m1, dt_mp, far)
    _, d_int, _, _ = composite(RaySampleBatch(t, dt, sigma))
    nan = np.nan
    out = {
        "v_th": np.full(R, float(v_th)),
        "v_max": np.where(hit, v_max, nan),
        "dt_m": np.where(hit, dt_m, nan),
        "lower": np.where(hit, lower, nan),
        "upper": np.where(hit, upper, nan),
        "abs_bound": np.where(hit, np.maximum(np.abs(lower), np.abs(upper)), nan),
        "d_int": d_int,
        "d_ext": np.where(hit, t[rows, m], nan),
        "degenerate": hit & ~has_succ,
    }
    return out


BOUND_CSV_HEADER = "ray_id,v_th,v_max,dt_m,lower,upper,abs_bound,d_int,d_ext"


def bound_csv_rows(bounds: dict[str, np.ndarray], ids=None) -> list[str]:
    keys = BOUND_CSV_HEADER.split(",")[1:]
    n = len(bounds["v_th"])
    ids = range(n) if ids is None else ids
    rows = []
    for i, rid in zip(range(n), ids):
        rows.append(",".join([str(rid)] + [_fmt(bounds[k][i]) for k in keys]))
    return rows


def _fmt(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    return repr(x)


# ----------------------------------------------------------------- cameras


@dataclass
class Camera:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    fov_deg: float = 40.0
    width: int = 64
    height: int = 64
    near: float = 1.0
    far: float = 3.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.look_at = np.asarray(self.look_at, dtype=np.float64)
        self.up = np.asarray(self.up, dtype=np.float64)
        if np.allclose(self.position, self.look_at):
            raise ContractViolation("camera position equals look_at")
        if not 0 < self.fov_deg < 180:
            raise ContractViolation("fov must be in (0, 180)")
        if not self.near < self.far:
            raise ContractViolation("near must be < far")

    def basis(self):
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        up = self.up
        if abs(np.dot(up / np.linalg.norm(up), fwd)) > 0.999:
            up = np.array([0.0, 1.0, 0.0]) if abs(fwd[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
        right = np.cross(fwd, up)
        right /= np.linalg.norm(right)
        true_up = np.cross(right, fwd)
        return right, true_up, fwd

    def rays(self):
        """Origins and unit directions through pixel centres, row-major, top row first."""
        right, up, fwd = self.basis()
        tan_half = math.tan(math.radians(self.fov_deg) / 2)
        aspect = self.width / self.height
        js, is_ = np.meshgrid(np.arange(self.width), np.arange(self.height))
        px = ((js + 0.5) / self.width * 2 - 1) * tan_half * aspect
        py = (1 - (is_ + 0.5) / self.height * 2) * tan_half
        dirs = fwd[None] + px.reshape(-1, 1) * right[None] + py.reshape(-1, 1) * up[None]
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(self.position, dirs.shape).copy()
        return origins, dirs

    def to_dict(self) -> dict:
        return {
            "position": self.position.tolist(), "look_at": self.look_at.tolist(), "up": self.up.tolist(),
            "fov_deg": self.fov_deg, "width": self.width, "height": self.height,
            "near": self.near, "far": self.far,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(**d)


@dataclass
class RenderSettings:
    n_samples: int = 64
    chunk: int = 4096
    workers: int = 1
    background: tuple = (1.0, 1.0, 1.0)


@dataclass
class RenderResult:
    rgb: np.ndarray              # (H, W, 3)
    depth_integrated: np.ndarray  # (H, W)
    depth_extracted: np.ndarray  # (H, W), NaN = background
    bounds: dict                 # per-pixel arrays, flattened row-major
    background_mask: np.ndarray  # (H, W)


def render_rays(origins, dirs, near, far, field_fn: Callable, settings: RenderSettings):
    """Deterministic render of R rays; ``field_fn(x, d) -> (sigma, rgb)`` numpy arrays."""
    R = origins.shape[0]
    S = settings.n_samples
    t, dt = sample_rays(np.broadcast_to(near, (R,)), np.broadcast_to(far, (R,)), S)
    pts = (origins[:, None, :] + t[..., None] * dirs[:, None, :]).reshape(-1, 3)
    dd = np.repeat(dirs, S, axis=0)
    sigma, rgb = field_fn(pts, dd)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(R, S)
    rgb = np.asarray(rgb, dtype=np.float64).reshape(R, S, 3)
    return t, dt, sigma, rgb


def render_image(camera: Camera, field_fn: Callable, settings: RenderSettings, v_th: float = 0.0) -> RenderResult:
    """Render RGB, both depth maps and per-pixel bounds for one camera.

    ``field_fn(x, d)`` maps points (P, 3) and unit directions (P, 3) to
    ``(sigma (P,), rgb (P, 3))``.  Pixels are processed in chunks, optionally
    on a thread pool; results are assembled in chunk order.
    """
    if settings.n_samples < 2:
        raise ContractViolation("need at least 2 samples")
    origins, dirs = camera.rays()
    R = origins.shape[0]
    starts = list(range(0, R, settings.chunk))
    bg = np.asarray(settings.background, dtype=np.float64)

    def work(s):
        sl = slice(s, min(s + settings.chunk, R))
        try:
            t, dt, sigma, rgb = render_rays(origins[sl], dirs[sl], camera.near, camera.far, field_fn, settings)
        except dc.NumericError as e:
            raise dc.NumericError(e.op, f"pixels {sl.start}..{sl.stop - 1}") from e
        color, d_int, _, _ = composite(RaySampleBatch(t, dt, sigma, rgb), background=bg)
        b = bound_rays(t, dt, sigma, v_th, camera.far)
        return color, d_int, b

    if settings.workers > 1:
        with ThreadPoolExecutor(settings.workers) as ex:
            parts = list(ex.map(work, starts))
    else:
        parts = [work(s) for s in starts]
    color = np.concatenate([p[0] for p in parts])
    d_int = np.concatenate([p[1] for p in parts])
    bounds = {k: np.concatenate([p[2][k] for p in parts]) for k in parts[0][2]}
    H, W = camera.height, camera.width
    d_ext = bounds["d_ext"].reshape(H, W)
    return RenderResult(color.reshape(H, W, 3), d_int.reshape(H, W), d_ext, bounds, np.isnan(d_ext))
