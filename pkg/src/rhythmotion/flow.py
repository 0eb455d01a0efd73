"""Dense optical flow (Horn-Schunck on a 2-level pyramid) and flow utilities.

Frames are grayscale arrays in [0, 1], shape (H, W) or batched (N, H, W).
Flow fields have shape (2, H, W) / (N, 2, H, W) with channels (u, v): u is
horizontal displacement (+x right), v vertical (+y down), in pixels/frame.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numba import njit
from scipy import ndimage

from .containers import FormatError

ALPHA = 10.0
ITERATIONS = 100
LEVELS = 2
PATCH = 48


class FlowError(ValueError):
    pass


def _blur(img: np.ndarray, sigma: float) -> np.ndarray:
    s = (0,) * (img.ndim - 2) + (sigma, sigma)
    return ndimage.gaussian_filter(img, s, mode="nearest")


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape[-2] // 2 * 2, img.shape[-1] // 2 * 2
    x = img[..., :h, :w]
    return 0.25 * (x[..., 0::2, 0::2] + x[..., 1::2, 0::2] + x[..., 0::2, 1::2] + x[..., 1::2, 1::2])


def _resize(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of the last two axes (pixel-centre aligned)."""
    h, w = img.shape[-2:]
    H, W = shape
    ys = np.clip((np.arange(H) + 0.5) * h / H - 0.5, 0, h - 1)
    xs = np.clip((np.arange(W) + 0.5) * w / W - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = img[..., y0, :][..., :, x0]
    b = img[..., y0, :][..., :, x1]
    c = img[..., y1, :][..., :, x0]
    d = img[..., y1, :][..., :, x1]
    return (a * (1 - fx) + b * fx) * (1 - fy) + (c * (1 - fx) + d * fx) * fy


def _warp(img: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample img at (x + u, y + v) bilinearly with edge clamping."""
    h, w = img.shape[-2:]
    yy, xx = np.mgrid[0:h, 0:w]
    x = np.clip(xx + u, 0, w - 1)
    y = np.clip(yy + v, 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(int), w - 2)
    y0 = np.minimum(np.floor(y).astype(int), h - 2)
    fx = x - x0
    fy = y - y0
    lead = np.indices(img.shape[:-2]).reshape(img.ndim - 2, -1) if img.ndim > 2 else None
    if lead is None:
        g = lambda yi, xi: img[yi, xi]  # noqa: E731
    else:
        n = np.arange(img.shape[0])[:, None, None]
        g = lambda yi, xi: img[n, yi, xi]  # noqa: E731
    return (
        g(y0, x0) * (1 - fx) * (1 - fy)
        + g(y0, x0 + 1) * fx * (1 - fy)
        + g(y0 + 1, x0) * (1 - fx) * fy
        + g(y0 + 1, x0 + 1) * fx * fy
    )


@njit(cache=True, fastmath=True)
def _hs_iterate(a, b, c, e, f, u, v, iterations):
    # Jacobi sweeps of u <- ubar - (a ubar + b vbar + e), v <- vbar - (b ubar + c vbar + f)
    # with the 3x3 Horn-Schunck neighbourhood average and replicated borders
    n, h, w = u.shape
    pu = np.empty((h + 2, w + 2))
    pv = np.empty((h + 2, w + 2))
    for k in range(n):
        pu[1:-1, 1:-1] = u[k]
        pv[1:-1, 1:-1] = v[k]
        for _ in range(iterations):
            for i in range(1, h + 1):
                pu[i, 0] = pu[i, 1]
                pu[i, w + 1] = pu[i, w]
                pv[i, 0] = pv[i, 1]
                pv[i, w + 1] = pv[i, w]
            for j in range(w + 2):
                pu[0, j] = pu[1, j]
                pu[h + 1, j] = pu[h, j]
                pv[0, j] = pv[1, j]
                pv[h + 1, j] = pv[h, j]
            for i in range(h):
                for j in range(w):
                    ub = (pu[i, j + 1] + pu[i + 2, j + 1] + pu[i + 1, j] + pu[i + 1, j + 2]) * (1.0 / 6.0) + (
                        pu[i, j] + pu[i, j + 2] + pu[i + 2, j] + pu[i + 2, j + 2]
                    ) * (1.0 / 12.0)
                    vb = (pv[i, j + 1] + pv[i + 2, j + 1] + pv[i + 1, j] + pv[i + 1, j + 2]) * (1.0 / 6.0) + (
                        pv[i, j] + pv[i, j + 2] + pv[i + 2, j] + pv[i + 2, j + 2]
                    ) * (1.0 / 12.0)
                    u[k, i, j] = ub - (a[k, i, j] * ub + b[k, i, j] * vb + e[k, i, j])
                    v[k, i, j] = vb - (b[k, i, j] * ub + c[k, i, j] * vb + f[k, i, j])
            pu[1:-1, 1:-1] = u[k]
            pv[1:-1, 1:-1] = v[k]
    return u, v


def _hs_level(I1, I2, u, v, alpha, iterations):
    I2w = _warp(I2, u, v) if np.any(u) or np.any(v) else I2
    gy1, gx1 = np.gradient(I1, axis=(-2, -1))
    gy2, gx2 = np.gradient(I2w, axis=(-2, -1))
    Ix = 0.5 * (gx1 + gx2)
    Iy = 0.5 * (gy1 + gy2)
    It = I2w - I1 - Ix * u - Iy * v
    denom = alpha**2 + Ix**2 + Iy**2
    shape = u.shape
    as3 = lambda a: np.ascontiguousarray(a, dtype=np.float64).reshape((-1,) + shape[-2:])  # noqa: E731
    u, v = _hs_iterate(
        as3(Ix * Ix / denom),
        as3(Ix * Iy / denom),
        as3(Iy * Iy / denom),
        as3(Ix * It / denom),
        as3(Iy * It / denom),
        as3(u).copy(),
        as3(v).copy(),
        iterations,
    )
    return u.reshape(shape), v.reshape(shape)


def estimate_flow(
    prev: np.ndarray,
    next: np.ndarray,
    alpha: float = ALPHA,
    iterations: int = ITERATIONS,
    levels: int = LEVELS,
    sigma: float = 1.0,
) -> np.ndarray:
    """Horn-Schunck flow from ``prev`` to ``next`` (coarse-to-fine with warping).

    Intensities are rescaled to 0-255 so ``alpha`` has its customary meaning.
    """
    prev = np.asarray(prev, dtype=np.float64)
    next = np.asarray(next, dtype=np.float64)
    if prev.shape != next.shape or prev.ndim not in (2, 3):
        raise FlowError(f"frame shapes differ or are not 2-D: {prev.shape} vs {next.shape}")
    I1 = _blur(255.0 * prev, sigma)
    I2 = _blur(255.0 * next, sigma)
    pyramid = [(I1, I2)]
    for _ in range(levels - 1):
        a, b = pyramid[-1]
        if min(a.shape[-2:]) < 8:
            break
        pyramid.append((_downsample(a), _downsample(b)))
    u = np.zeros_like(pyramid[-1][0])
    v = np.zeros_like(u)
    for k, (a, b) in enumerate(reversed(pyramid)):
        if k > 0:
            sy = a.shape[-2] / u.shape[-2]
            sx = a.shape[-1] / u.shape[-1]
            u = _resize(u, a.shape[-2:]) * sx
            v = _resize(v, a.shape[-2:]) * sy
        u, v = _hs_level(a, b, u, v, alpha, iterations)
    return np.stack([u, v], axis=-3)


# -- augmentation --------------------------------------------------------------


@dataclass(frozen=True)
class FlowPatch:
    data: np.ndarray  # (2, p, p)
    origin: tuple[int, int]  # (row, col) of the crop
    crop: tuple[int, int]  # (crop_h, crop_w)

    @property
    def size(self) -> int:
        return self.data.shape[-1]


def resize_flow(flow: np.ndarray, out_size: int) -> np.ndarray:
    """Bilinear resize of a (..., 2, h, w) field with vectors rescaled to match."""
    h, w = flow.shape[-2:]
    out = _resize(flow, (out_size, out_size))
    out[..., 0, :, :] *= out_size / w
    out[..., 1, :, :] *= out_size / h
    return out


def crop_resize(flow: np.ndarray, rng: np.random.Generator, out_size: int = PATCH) -> FlowPatch:
    """Random square crop (side in [0.7, 1.0] * min(h, w)) resized to out_size."""
    if out_size < 8:
        raise FlowError("patch size must be at least 8")
    h, w = flow.shape[-2:]
    side = int(round(rng.uniform(0.7, 1.0) * min(h, w)))
    side = max(1, min(side, h, w))
    r = int(rng.integers(0, h - side + 1))
    c = int(rng.integers(0, w - side + 1))
    return crop_window(flow, (r, c), side, out_size)


def crop_window(flow: np.ndarray, origin: tuple[int, int], side: int, out_size: int) -> FlowPatch:
    """Square crop at ``origin`` (row, col) resized to ``out_size`` with vector rescaling."""
    r, c = origin
    h, w = flow.shape[-2:]
    if side < 1 or r < 0 or c < 0 or r + side > h or c + side > w:
        raise FlowError(f"crop {side} at {origin} does not fit a {h}x{w} field")
    data = resize_flow(flow[..., r : r + side, c : c + side], out_size)
    return FlowPatch(data, (r, c), (side, side))


def flow_l1_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute difference over both channels and all pixels."""
    if a.shape != b.shape:
        raise FlowError(f"flow shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean(np.abs(np.asarray(a, float) - np.asarray(b, float))))


# -- RFL1 binary export ------------------------------------------------------------


def write_flows(path: str | Path, flows: np.ndarray) -> None:
    """RFL1: magic, int32 w, int32 h, then interleaved float32 (u, v) per pixel.

    A stack of fields is written back to back after the single header.
    """
    flows = np.asarray(flows)
    if flows.ndim == 3:
        flows = flows[None]
    _, _, h, w = flows.shape
    inter = np.ascontiguousarray(flows.transpose(0, 2, 3, 1), dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(b"RFL1" + struct.pack("<ii", w, h))
        fh.write(inter.tobytes())


def read_flows(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != b"RFL1" or len(raw) < 12:
        raise FormatError(f"{path}: not an RFL1 file")
    w, h = struct.unpack("<ii", raw[4:12])
    body = np.frombuffer(raw[12:], dtype="<f4")
    per = w * h * 2
    if per == 0 or body.size % per:
        raise FormatError(f"{path}: payload does not hold whole {w}x{h} fields")
    return body.reshape(-1, h, w, 2).transpose(0, 3, 1, 2).astype(np.float64)
