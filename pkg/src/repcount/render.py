"""Density heatmap overlays for inspection."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

ALPHA = 0.5

# black -> purple -> orange -> pale yellow, sampled at 0, 1/3, 2/3, 1
_STOPS = np.array([0.0, 1 / 3, 2 / 3, 1.0])
_COLORS = np.array([[0, 0, 4], [120, 28, 109], [237, 105, 37], [252, 255, 164]], dtype=np.float64)


def colormap(v: np.ndarray) -> np.ndarray:
    """Values in [0, 1] -> uint8 RGB via piecewise-linear interpolation."""
    v = np.clip(np.asarray(v, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([np.interp(v, _STOPS, _COLORS[:, c]) for c in range(3)], axis=-1)
    return np.round(rgb).astype(np.uint8)


def heatmap(image: np.ndarray, density: np.ndarray | None) -> np.ndarray:
    """Image blended with the max-normalized density at ``ALPHA``."""
    if density is None:
        return image.copy()
    peak = float(density.max())
    heat = colormap(density / peak if peak > 0 else np.zeros_like(density))
    return np.round((1 - ALPHA) * image + ALPHA * heat).astype(np.uint8)


def overlay(image: np.ndarray, density: np.ndarray | None, boxes=()) -> Image.Image:
    """Side-by-side: the image with exemplar boxes, then the density heatmap."""
    h, w = image.shape[:2]
    left = Image.fromarray(np.ascontiguousarray(image[..., :3]))
    draw = ImageDraw.Draw(left)
    for i, b in enumerate(boxes):
        draw.rectangle([float(v) for v in b], outline=(255, 255, 0) if i == 0 else (0, 255, 255))
    canvas = Image.new("RGB", (2 * w, h))
    canvas.paste(left, (0, 0))
    canvas.paste(Image.fromarray(heatmap(image[..., :3], density)), (w, 0))
    return canvas
