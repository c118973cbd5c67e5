"""Gaussian dot-map rendering, counting, and the binary density map format."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

DEFAULT_SIGMA = 2.0
TRUNCATE = 4.0


def _kernel_1d(center: float, length: int, sigma: float) -> tuple[int, np.ndarray]:
    # pixel i covers [i, i+1); weight sampled at its center, mass renormalized to 1
    radius = int(np.ceil(TRUNCATE * sigma))
    pix = int(np.floor(center))
    lo, hi = max(pix - radius, 0), min(pix + radius + 1, length)
    x = np.arange(lo, hi) + 0.5
    g = np.exp(-0.5 * ((x - center) / sigma) ** 2)
    return lo, g / g.sum()


def render_density(dots, h: int, w: int, sigma: float = DEFAULT_SIGMA) -> np.ndarray:
    """
    Sum of one unit-mass Gaussian per dot.

    Each kernel is truncated at 4 sigma and at the image border, then
    renormalized, so ``render_density(dots, ...).sum() == len(dots)``.

    Args:
        dots: (N, 2) array of (x, y) pixel coordinates with 0 <= x < w, 0 <= y < h
        h, w: output size
        sigma: kernel width in pixels

    Returns:
        (h, w) float64 array
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    z = np.zeros((h, w))
    dots = np.asarray(dots, dtype=np.float64).reshape(-1, 2)
    if len(dots) == 0:
        return z
    bad = (dots[:, 0] < 0) | (dots[:, 0] >= w) | (dots[:, 1] < 0) | (dots[:, 1] >= h)
    if np.any(bad) or not np.all(np.isfinite(dots)):
        raise ValueError(f"dot outside {w}x{h} image: {dots[np.argmax(bad)].tolist()}")
    for x, y in dots:
        x0, gx = _kernel_1d(x, w, sigma)
        y0, gy = _kernel_1d(y, h, sigma)
        z[y0 : y0 + len(gy), x0 : x0 + len(gx)] += np.outer(gy, gx)
    return z


def count(z) -> float:
    return float(np.sum(z))


def save_density(path, z) -> Path:
    """Write ``<path>.bin`` (row-major little-endian float32) and ``<path>.hdr``."""
    path = Path(path)
    z = np.asarray(z)
    if z.ndim != 2:
        raise ValueError("density map must be 2-D")
    bin_path = path.with_suffix(".bin")
    bin_path.parent.mkdir(parents=True, exist_ok=True)
    bin_path.write_bytes(np.ascontiguousarray(z, dtype="<f4").tobytes())
    header = {"h": int(z.shape[0]), "w": int(z.shape[1]), "dtype": "float32-le"}
    path.with_suffix(".hdr").write_text(json.dumps(header) + "\n")
    return bin_path


def load_density(path) -> np.ndarray:
    path = Path(path)
    header = json.loads(path.with_suffix(".hdr").read_text())
    h, w = int(header["h"]), int(header["w"])
    data = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f4")
    if data.size != h * w:
        raise ValueError(f"{path}: expected {h * w} values, found {data.size}")
    return data.reshape(h, w).astype(np.float32)
