"""Forward/backward pairs for the handful of layers the encoders and policies need.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
takes the upstream gradient and that cache. Arrays are float64.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class NonFiniteError(FloatingPointError):
    pass


def check_finite(x: np.ndarray, what: str) -> None:
    if not np.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {what}")


# -- dense -------------------------------------------------------------------


def dense_forward(x, W, b):
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ValueError(f"dense shapes disagree: x{x.shape} W{W.shape} b{b.shape}")
    check_finite(x, "dense input")
    return x @ W + b, (x, W)


def dense_backward(dy, cache):
    x, W = cache
    dx = dy @ W.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, x2.T @ dy2, dy2.sum(axis=0)


# -- conv2d (valid cross-correlation, NCHW) -----------------------------------


def conv2d_forward(x, K, b, stride: int = 1):
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n, c, h, w = x.shape
    f, kc, kh, kw = K.shape
    if kc != c or kh > h or kw > w or b.shape != (f,):
        raise ValueError(f"conv shapes disagree: x{x.shape} K{K.shape} b{b.shape}")
    check_finite(x, "conv input")
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    y = cols @ K.reshape(f, -1).T + b
    y = y.reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(y), (x.shape, cols, K, stride, ho, wo)


def conv2d_backward(dy, cache):
    xshape, cols, K, stride, ho, wo = cache
    n, c, h, w = xshape
    f, _, kh, kw = K.shape
    dy2 = dy.transpose(0, 2, 3, 1).reshape(-1, f)
    dK = (dy2.T @ cols).reshape(K.shape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ K.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
    dx = np.zeros(xshape)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                :, :, :, :, i, j
            ].transpose(0, 3, 1, 2)
    return dx, dK, db


# -- GELU (tanh approximation) ------------------------------------------------

_C = np.sqrt(2.0 / np.pi)


def gelu_forward(x):
    check_finite(x, "gelu input")
    inner = _C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    dinner = _C * (1.0 + 3 * 0.044715 * (x * x))
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner)


def gelu(x):
    return gelu_forward(x)[0]


# -- layer norm over the last axis ------------------------------------------


def layernorm_forward(x, g, b, eps: float = 1e-5):
    check_finite(x, "layernorm input")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xh = xc * inv
    return xh * g + b, (xh, inv, g)


def layernorm_backward(dy, cache):
    xh, inv, g = cache
    d = xh.shape[-1]
    dg = (dy * xh).reshape(-1, d).sum(axis=0)
    db = dy.reshape(-1, d).sum(axis=0)
    dxh = dy * g
    dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True))
    return dx, dg, db


# -- softmax / attention ------------------------------------------------------


def softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attention_forward(a, Wq, Wk, Wv):
    """Single-head scaled dot-product self-attention on (..., T, d)."""
    check_finite(a, "attention input")
    q, k, v = a @ Wq, a @ Wk, a @ Wv
    scale = 1.0 / np.sqrt(q.shape[-1])
    A = softmax((q @ np.swapaxes(k, -1, -2)) * scale)
    return A @ v, (a, q, k, v, A, scale, Wq, Wk, Wv)


def attention_backward(do, cache):
    a, q, k, v, A, scale, Wq, Wk, Wv = cache
    dA = do @ np.swapaxes(v, -1, -2)
    dv = np.swapaxes(A, -1, -2) @ do
    ds = A * (dA - (dA * A).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = np.swapaxes(ds, -1, -2) @ q
    d = a.shape[-1]
    a2 = a.reshape(-1, d)
    grads = {
        "Wq": a2.T @ dq.reshape(-1, dq.shape[-1]),
        "Wk": a2.T @ dk.reshape(-1, dk.shape[-1]),
        "Wv": a2.T @ dv.reshape(-1, dv.shape[-1]),
    }
    da = dq @ Wq.T + dk @ Wk.T + dv @ Wv.T
    return da, grads


def sinusoidal_encoding(t: int, d: int) -> np.ndarray:
    pos = np.arange(t)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
