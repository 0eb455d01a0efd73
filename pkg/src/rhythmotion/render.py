"""Deterministic anti-aliased rasterization of capsules, boxes and discs.

All primitives are batched: point arguments have shape (N, 2) in pixel
coordinates (x right, y down, pixel centres at integer + 0.5) and the result
is an (N, H, W) coverage map in [0, 1].
"""

from __future__ import annotations

import numpy as np


def _grid(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:h, 0:w]
    return xs + 0.5, ys + 0.5


def capsule(h: int, w: int, a: np.ndarray, b: np.ndarray, radius: float) -> np.ndarray:
    """Thick line segment a-b with rounded ends."""
    px, py = _grid(h, w)
    ax, ay = a[:, 0, None, None], a[:, 1, None, None]
    dx = (b[:, 0] - a[:, 0])[:, None, None]
    dy = (b[:, 1] - a[:, 1])[:, None, None]
    ll = dx * dx + dy * dy
    t = np.where(ll > 0, ((px - ax) * dx + (py - ay) * dy) / np.where(ll > 0, ll, 1.0), 0.0)
    t = np.clip(t, 0.0, 1.0)
    d = np.hypot(px - (ax + t * dx), py - (ay + t * dy))
    return np.clip(radius - d + 0.5, 0.0, 1.0)


def box(h: int, w: int, center: np.ndarray, half: tuple[float, float]) -> np.ndarray:
    """Axis-aligned rectangle with a one-pixel linear edge ramp."""
    px, py = _grid(h, w)
    cx, cy = center[:, 0, None, None], center[:, 1, None, None]
    ex = np.clip(half[0] - np.abs(px - cx) + 0.5, 0.0, 1.0)
    ey = np.clip(half[1] - np.abs(py - cy) + 0.5, 0.0, 1.0)
    return ex * ey


def disc(h: int, w: int, center: np.ndarray, radius: float) -> np.ndarray:
    px, py = _grid(h, w)
    d = np.hypot(px - center[:, 0, None, None], py - center[:, 1, None, None])
    return np.clip(radius - d + 0.5, 0.0, 1.0)


def compose(background: np.ndarray, layers: list[tuple[np.ndarray, float]]) -> np.ndarray:
    """Paint coverage layers (coverage, intensity) over a background, in order."""
    img = np.array(background, dtype=np.float64)
    for cov, level in layers:
        img = img * (1.0 - cov) + level * cov
    return img


def centroid(frame: np.ndarray, threshold: float = 0.5) -> tuple[float, float]:
    """Intensity-weighted centroid (x, y) of pixels brighter than ``threshold``."""
    frame = np.asarray(frame)
    wgt = np.where(frame > threshold, frame, 0.0)
    px, py = _grid(*wgt.shape)
    s = wgt.sum()
    return float((wgt * px).sum() / s), float((wgt * py).sum() / s)
