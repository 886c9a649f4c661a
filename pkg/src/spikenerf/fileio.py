"""Image, point-cloud and table files: PPM (P6), PFM, ASCII PLY, CSV, JSON."""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np


def write_ppm(path, rgb: np.ndarray) -> None:
    """8-bit binary PPM; values in [0, 1] are clipped and rounded."""
    rgb = np.asarray(rgb, dtype=np.float64)
    h, w, _ = rgb.shape
    data = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _tokens(f, n):
    out = []
    while len(out) < n:
        line = f.readline()
        if not line:
            raise ValueError("truncated header")
        line = line.split(b"#")[0]
        out += line.split()
    return out


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h, maxval = _tokens(f, 4)
        if magic != b"P6":
            raise ValueError(f"{path}: not a P6 file")
        w, h, maxval = int(w), int(h), int(maxval)
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def write_pfm(path, image: np.ndarray) -> None:
    """Little-endian PFM (scale -1.0); rows stored bottom-to-top as the format defines.

    2-D arrays are written as greyscale ``Pf``, (H, W, 3) arrays as ``PF``.
    NaN marks background in depth maps.
    """
    image = np.asarray(image, dtype="<f4")
    color = image.ndim == 3
    h, w = image.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{'PF' if color else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(image[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        chans = 3 if magic == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * chans * 4), dtype=dtype)
    shape = (h, w, 3) if chans == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)


def write_ply(path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(pts)}\n")
        f.write("property float x\nproperty float y\nproperty float z\nend_header\n")
        for p in pts:
            f.write(f"{p[0]:.7g} {p[1]:.7g} {p[2]:.7g}\n")


def read_ply(path) -> np.ndarray:
    with open(path) as f:
        n = 0
        for line in f:
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            if line.strip() == "end_header":
                break
        rows = [list(map(float, f.readline().split()[:3])) for _ in range(n)]
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)


def fmt(x) -> str:
    """Deterministic float formatting for CSV output."""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    return "nan" if math.isnan(x) else repr(x)


def write_csv(path, header: str, rows) -> None:
    with open(path, "w", newline="\n") as f:
        f.write(header + "\n")
        for row in rows:
            f.write((row if isinstance(row, str) else ",".join(fmt(v) for v in row)) + "\n")


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    lines = Path(path).read_text().splitlines()
    return lines[0].split(","), [ln.split(",") for ln in lines[1:] if ln]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
