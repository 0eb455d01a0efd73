"""Synthetic rigid-translation oracle for the flow estimator."""

import numpy as np
from scipy import ndimage


def translated_square(d: tuple[float, float], size: int = 48, side: int = 10, seed: int = 0):
    """Textured square and its copy shifted by d = (dx, dy) px. Returns (prev, next, interior mask)."""
    rng = np.random.default_rng(seed)
    c = size // 2 - side // 2
    prev = np.zeros((size, size))
    prev[c : c + side, c : c + side] = 1.0
    if seed:
        prev[c : c + side, c : c + side] = rng.uniform(0.6, 1.0, (side, side))
        prev = ndimage.gaussian_filter(prev, 0.7)
    nxt = ndimage.shift(prev, (d[1], d[0]), order=1, mode="constant")
    mask = np.zeros_like(prev, dtype=bool)
    mask[c + 2 : c + side - 2, c + 2 : c + side - 2] = True
    return prev, nxt, mask


def interior_error(flow: np.ndarray, mask: np.ndarray, d) -> tuple[float, float]:
    return abs(flow[0][mask].mean() - d[0]), abs(flow[1][mask].mean() - d[1])
