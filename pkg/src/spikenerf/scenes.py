"""Analytic scenes that act as ground truth for density, colour and depth."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .diffcore import ContractViolation
from .fileio import read_json, read_pfm, read_ppm, write_json, write_pfm, write_ppm
from .renderer import Camera, Ray, RaySampleBatch, composite, sample_rays

_EPS_DIR = 1e-15


def _frame(normal):
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    a = np.eye(3)[int(np.argmin(np.abs(n)))]
    u = np.cross(n, a)
    u /= np.linalg.norm(u)
    return u, np.cross(n, u), n


def _slab_intervals(o_loc, d_loc, half):
    """Ray/box intervals in box-local coordinates; misses give (inf, -inf)."""
    R = o_loc.shape[0]
    t0 = np.full(R, -np.inf)
    t1 = np.full(R, np.inf)
    for a in range(3):
        oa, da, h = o_loc[:, a], d_loc[:, a], half[a]
        par = np.abs(da) < _EPS_DIR
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (-h - oa) / da
            tb = (h - oa) / da
        lo = np.where(par, np.where(np.abs(oa) <= h, -np.inf, np.inf), np.minimum(ta, tb))
        hi = np.where(par, np.where(np.abs(oa) <= h, np.inf, -np.inf), np.maximum(ta, tb))
        t0 = np.maximum(t0, lo)
        t1 = np.minimum(t1, hi)
    return t0, t1


@dataclass
class Sphere:
    center: Sequence[float]
    radius: float
    density: float
    rgb: Sequence[float]
    type: str = "sphere"

    def contains(self, x):
        return np.sum((x - np.asarray(self.center)) ** 2, axis=-1) <= self.radius ** 2

    def intervals(self, o, d):
        oc = o - np.asarray(self.center)
        b = np.sum(oc * d, axis=-1)
        c = np.sum(oc * oc, axis=-1) - self.radius ** 2
        disc = b * b - c
        s = np.sqrt(np.maximum(disc, 0))
        miss = disc < 0
        return np.where(miss, np.inf, -b - s), np.where(miss, -np.inf, -b + s)

    def extent(self):
        c = np.asarray(self.center, dtype=np.float64)
        return c - self.radius, c + self.radius


@dataclass
class Box:
    min: Sequence[float]
    max: Sequence[float]
    density: float
    rgb: Sequence[float]
    type: str = "box"

    def contains(self, x):
        return np.all((x >= np.asarray(self.min)) & (x <= np.asarray(self.max)), axis=-1)

    def intervals(self, o, d):
        lo, hi = np.asarray(self.min, dtype=np.float64), np.asarray(self.max, dtype=np.float64)
        c = (lo + hi) / 2
        return _slab_intervals(o - c, d, (hi - lo) / 2)

    def extent(self):
        return np.asarray(self.min, dtype=np.float64), np.asarray(self.max, dtype=np.float64)


@dataclass
class Sheet:
    """Plate of given thickness around a plane, optionally a square patch of ``half_extent``."""

    point: Sequence[float]
    normal: Sequence[float]
    thickness: float
    density: float
    rgb: Sequence[float]
    half_extent: Optional[float] = None
    type: str = "sheet"

    def _half(self):
        e = self.half_extent if self.half_extent is not None else 1e9
        return np.array([e, e, self.thickness / 2])

    def _local(self, x):
        u, v, n = _frame(self.normal)
        rel = x - np.asarray(self.point)
        return np.stack([rel @ u, rel @ v, rel @ n], axis=-1)

    def contains(self, x):
        return np.all(np.abs(self._local(x)) <= self._half(), axis=-1)

    def intervals(self, o, d):
        u, v, n = _frame(self.normal)
        basis = np.stack([u, v, n], axis=1)
        return _slab_intervals((o - np.asarray(self.point)) @ basis, d @ basis, self._half())

    def extent(self):
        u, v, n = _frame(self.normal)
        h = self._half()
        if self.half_extent is None:
            return None
        corners = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]) * h
        pts = np.asarray(self.point) + corners @ np.stack([u, v, n])
        return pts.min(axis=0), pts.max(axis=0)


@dataclass
class Slab(Sheet):
    semi_transparent: bool = False
    type: str = "slab"


PRIMITIVES = {"sphere": Sphere, "box": Box, "sheet": Sheet, "slab": Slab}
Primitive = Union[Sphere, Box, Sheet, Slab]


@dataclass
class SceneSpec:
    primitives: list
    background: Sequence[float] = (1.0, 1.0, 1.0)
    bounds: Sequence[Sequence[float]] = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    name: str = "custom"

    def __post_init__(self):
        lo, hi = (np.asarray(b, dtype=np.float64) for b in self.bounds)
        for p in self.primitives:
            if p.density <= 0:
                raise ContractViolation(f"{p.type}: density must be positive")
            if isinstance(p, Sheet) and p.thickness <= 0:
                raise ContractViolation(f"{p.type}: thickness must be positive")
            ext = p.extent()
            if ext is not None and (np.any(ext[0] < lo - 1e-9) or np.any(ext[1] > hi + 1e-9)):
                raise ContractViolation(f"{p.type} extends outside the scene bounds")

    def to_dict(self) -> dict:
        prims = []
        for p in self.primitives:
            d = {k: (list(map(float, v)) if isinstance(v, (list, tuple, np.ndarray)) else v)
                 for k, v in p.__dict__.items()}
            prims.append(d)
        return {
            "name": self.name,
            "primitives": prims,
            "background": list(map(float, self.background)),
            "bounds": [list(map(float, b)) for b in self.bounds],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        prims = []
        for p in d["primitives"]:
            p = dict(p)
            kind = p.pop("type")
            prims.append(PRIMITIVES[kind](**p))
        return cls(prims, tuple(d.get("background", (1, 1, 1))),
                   tuple(tuple(b) for b in d.get("bounds", ((-1, -1, -1), (1, 1, 1)))), d.get("name", "custom"))

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "SceneSpec":
        return cls.from_dict(read_json(path))

    def translated(self, offset) -> "SceneSpec":
        off = np.asarray(offset, dtype=np.float64)
        d = self.to_dict()
        for p in d["primitives"]:
            for key in ("center", "point"):
                if key in p:
                    p[key] = list(np.asarray(p[key]) + off)
            if p["type"] == "box":
                p["min"] = list(np.asarray(p["min"]) + off)
                p["max"] = list(np.asarray(p["max"]) + off)
        d["bounds"] = [list(np.asarray(b) + off) for b in d["bounds"]]
        return SceneSpec.from_dict(d)


def in_bounds(scene: SceneSpec, x) -> np.ndarray:
    lo, hi = (np.asarray(b) for b in scene.bounds)
    return np.all((x >= lo) & (x <= hi), axis=-1)


def eval_scene(scene: SceneSpec, x, clip: bool = False):
    """Ground-truth density and colour at points x (3,) or (P, 3).

    Overlaps take the maximum density; colour comes from the primitive that
    supplies it.  Points outside the bounds are a contract violation unless
    ``clip`` is set, in which case they read as empty.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    inside = in_bounds(scene, x2)
    if not clip and not inside.all():
        raise ContractViolation("point outside scene bounds")
    sigma = np.zeros(len(x2))
    rgb = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), (len(x2), 3)).copy()
    for p in scene.primitives:
        c = p.contains(x2) & inside
        better = c & (p.density > sigma)
        sigma = np.where(better, p.density, sigma)
        rgb[better] = np.asarray(p.rgb, dtype=np.float64)
    if single:
        return float(sigma[0]), rgb[0]
    return sigma, rgb


def gt_depth_rays(scene: SceneSpec, origins, dirs, near=0.0, far=np.inf) -> np.ndarray:
    """First entry distance into any primitive within [near, far]; NaN if none."""
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    R = origins.shape[0]
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (R,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (R,))
    best = np.full(R, np.inf)
    for p in scene.primitives:
        t0, t1 = p.intervals(origins, dirs)
        lo = np.maximum(t0, near)
        hi = np.minimum(t1, far)
        ok = lo <= hi
        best = np.where(ok & (lo < best), lo, best)
    return np.where(np.isfinite(best), best, np.nan)


def gt_depth(scene: SceneSpec, ray: Ray) -> Optional[float]:
    d = gt_depth_rays(scene, ray.origin[None], ray.direction[None], 0.0, np.inf)[0]
    return None if np.isnan(d) else float(d)


def oracle_render_rays(scene: SceneSpec, origins, dirs, near, far, n_fine: int = 1024, chunk: int = 256):
    """High-resolution quadrature of the analytic field.

    Returns ``(rgb (R, 3), d_integrated (R,))``; rays that collect no weight
    get NaN depth.
    """
    if n_fine < 1024:
        raise ContractViolation("oracle quadrature needs n_fine >= 1024")
    origins = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    R = origins.shape[0]
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (R,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (R,))
    rgb_out = np.zeros((R, 3))
    depth_out = np.zeros(R)
    bg = np.asarray(scene.background, dtype=np.float64)
    for s in range(0, R, chunk):
        sl = slice(s, min(s + chunk, R))
        t, dt = sample_rays(near[sl], far[sl], n_fine)
        pts = origins[sl, None, :] + t[..., None] * dirs[sl, None, :]
        sig, col = eval_scene(scene, pts.reshape(-1, 3), clip=True)
        n = t.shape[0]
        color, d_int, w, _ = composite(
            RaySampleBatch(t, dt, sig.reshape(n, n_fine), col.reshape(n, n_fine, 3)), background=bg)
        rgb_out[sl] = color
        depth_out[sl] = np.where(w.sum(axis=1) > 0, d_int, np.nan)
    return rgb_out, depth_out


def oracle_render(scene: SceneSpec, ray: Ray, n_fine: int = 1024):
    rgb, d = oracle_render_rays(scene, ray.origin[None], ray.direction[None], ray.near, ray.far, n_fine)
    return rgb[0], (None if np.isnan(d[0]) else float(d[0]))


# ------------------------------------------------------------- scene suite

DEFAULT_NEAR, DEFAULT_FAR, DEFAULT_SAMPLES = 1.0, 3.0, 64
DEFAULT_DT = (DEFAULT_FAR - DEFAULT_NEAR) / DEFAULT_SAMPLES


def _tilted(x, y, z):
    v = np.array([x, y, z], dtype=np.float64)
    return tuple(v / np.linalg.norm(v))


def builtin_scene(name: str) -> SceneSpec:
    """Shipped scenes.  ``thin-sheet`` is two sampling intervals thick."""
    if name == "sphere":
        prims = [Sphere((0, 0, 0), 0.5, 500.0, (0.85, 0.35, 0.2))]
    elif name == "box":
        prims = [Box((-0.4, -0.4, -0.4), (0.4, 0.4, 0.4), 500.0, (0.2, 0.5, 0.85))]
    elif name == "thin-sheet":
        prims = [Sheet((0, 0, 0), _tilted(0.25, 0.15, 1.0), 2 * DEFAULT_DT, 500.0, (0.2, 0.7, 0.3), half_extent=0.55)]
    elif name == "semi-slab":
        prims = [Slab((0, 0, 0), (0, 0, 1), 0.5, 2.0, (0.1, 0.3, 0.9), half_extent=0.55, semi_transparent=True)]
    elif name == "slanted-slab":
        prims = [Slab((0, 0, 0), _tilted(1.0, 0.0, 1.0), 0.3, 8.0, (0.9, 0.6, 0.1), half_extent=0.5,
                      semi_transparent=True)]
    else:
        raise KeyError(f"unknown scene {name!r}; choose from {SCENE_NAMES}")
    return SceneSpec(prims, (1.0, 1.0, 1.0), ((-1, -1, -1), (1, 1, 1)), name)


SCENE_NAMES = ("sphere", "box", "thin-sheet", "semi-slab", "slanted-slab")


def load_scene(name_or_path) -> SceneSpec:
    if str(name_or_path) in SCENE_NAMES:
        return builtin_scene(str(name_or_path))
    return SceneSpec.load(name_or_path)


def orbit_cameras(n: int, radius: float = 2.0, width: int = 64, height: int = 64, fov_deg: float = 40.0,
                  near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR, seed: int = 0) -> list[Camera]:
    """Cameras on a Fibonacci sphere looking at the origin; ``seed`` spins the lattice."""
    rng = np.random.default_rng(seed)
    spin = rng.uniform(0, 2 * math.pi)
    golden = math.pi * (3 - math.sqrt(5))
    cams = []
    for i in range(n):
        z = 1 - 2 * (i + 0.5) / n
        rho = math.sqrt(max(0.0, 1 - z * z))
        phi = spin + golden * i
        pos = radius * np.array([rho * math.cos(phi), rho * math.sin(phi), z])
        cams.append(Camera(pos, np.zeros(3), np.array([0.0, 0.0, 1.0]), fov_deg, width, height, near, far))
    return cams


# ----------------------------------------------------------------- datasets


@dataclass
class DatasetManifest:
    scene_path: str
    cameras: list[Camera]
    images: list[dict]
    settings: dict
    seed: int
    root: Path = field(default=Path("."), compare=False)

    def to_dict(self) -> dict:
        return {
            "scene": self.scene_path,
            "cameras": [c.to_dict() for c in self.cameras],
            "images": self.images,
            "settings": self.settings,
            "seed": self.seed,
        }

    def save(self, path) -> None:
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        d = read_json(path)
        m = cls(d["scene"], [Camera.from_dict(c) for c in d["cameras"]], d["images"], d["settings"], d["seed"],
                path.parent)
        m.validate()
        return m

    def validate(self) -> None:
        for cam, img in zip(self.cameras, self.images):
            for key in ("rgb", "depth"):
                p = self.root / img[key]
                if not p.exists():
                    raise FileNotFoundError(p)

    def scene(self) -> SceneSpec:
        return SceneSpec.load(self.root / self.scene_path)

    def views(self):
        """Yields (camera, rgb (H, W, 3), gt depth (H, W)) per view."""
        for cam, img in zip(self.cameras, self.images):
            rgb = read_ppm(self.root / img["rgb"])
            depth = read_pfm(self.root / img["depth"]).astype(np.float64)
            if rgb.shape[:2] != (cam.height, cam.width):
                raise ValueError(f"{img['rgb']}: resolution does not match camera")
            yield cam, rgb, depth


def render_gt_view(scene: SceneSpec, cam: Camera, n_fine: int = 1024):
    origins, dirs = cam.rays()
    rgb, _ = oracle_render_rays(scene, origins, dirs, cam.near, cam.far, n_fine)
    depth = gt_depth_rays(scene, origins, dirs, cam.near, cam.far)
    return rgb.reshape(cam.height, cam.width, 3), depth.reshape(cam.height, cam.width)


def generate_dataset(scene: SceneSpec, cameras: Sequence[Camera], n_fine: int, out_dir, seed: int = 0,
                     scene_name: str = "scene.json") -> DatasetManifest:
    """Render GT RGB (PPM) and depth (PFM) for every camera and write a manifest."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create {out}: {e}") from e
    scene.save(out / scene_name)
    images = []
    for i, cam in enumerate(cameras):
        rgb, depth = render_gt_view(scene, cam, n_fine)
        names = {"rgb": f"rgb_{i:03d}.ppm", "depth": f"depth_{i:03d}.pfm"}
        try:
            write_ppm(out / names["rgb"], rgb)
            write_pfm(out / names["depth"], depth)
        except OSError as e:
            raise OSError(f"failed writing view {i} under {out}: {e}") from e
        images.append(names)
    manifest = DatasetManifest(scene_name, list(cameras), images, {"n_fine": n_fine}, seed, out)
    manifest.save(out / "manifest.json")
    return manifest
