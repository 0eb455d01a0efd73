"""Parameter storage, layers built on ops, Adam, and a finite-difference checker."""

from __future__ import annotations

import hashlib
from typing import Callable

import numpy as np

from . import ops
from .ops import NonFiniteError


class ParamStore:
    """Named float64 parameters with gradient buffers and Adam moments."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        value = np.array(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        self.m[name] = np.zeros_like(value)
        self.v[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def accumulate(self, name: str, g: np.ndarray) -> None:
        self.grads[name] += g

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params.values()])

    def flat_grad(self) -> np.ndarray:
        return np.concatenate([self.grads[n].ravel() for n in self.params])

    def set_flat(self, theta: np.ndarray) -> None:
        i = 0
        for p in self.params.values():
            p[...] = theta[i : i + p.size].reshape(p.shape)
            i += p.size

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float((g**2).sum()) for g in self.grads.values())))

    def clip_grad_norm(self, max_norm: float) -> float:
        norm = self.grad_norm()
        if norm > max_norm > 0:
            for g in self.grads.values():
                g *= max_norm / norm
        return norm

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    def copy_from(self, other: "ParamStore") -> None:
        for name, p in other.params.items():
            self.params[name][...] = p


def adam_step(
    store: ParamStore,
    grads: dict[str, np.ndarray] | None = None,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Bias-corrected Adam update in place; uses ``store.grads`` when grads is None."""
    grads = store.grads if grads is None else grads
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    store.step += 1
    c1 = 1.0 - beta1**store.step
    c2 = 1.0 - beta2**store.step
    for name, g in grads.items():
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        store.params[name] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def grad_check(
    f: Callable[[np.ndarray], tuple[float, np.ndarray]],
    theta: np.ndarray,
    h: float = 1e-4,
    floor: float = 1e-7,
) -> float:
    """Max relative error between f's analytic gradient and central differences.

    ``f(theta)`` returns ``(value, gradient)``. Per coordinate the error is
    |a - n| / max(|a| + |n|, floor), so coordinates where both are ~0 score 0.
    """
    theta = np.array(theta, dtype=np.float64)
    _, analytic = f(theta.copy())
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.zeros(theta.size)
    flat = theta.ravel()
    for i in range(theta.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(theta.copy())[0]
        flat[i] = old - h
        fm = f(theta.copy())[0]
        flat[i] = old
        numeric[i] = (fp - fm) / (2 * h)
    err = np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), floor)
    return float(err.max(initial=0.0))


# -- layers ---------------------------------------------------------------------


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, scale: float = 1.0) -> np.ndarray:
    bound = scale * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Dense:
    def __init__(self, store: ParamStore, name: str, n_in: int, n_out: int, rng, scale: float = 1.0):
        self.store, self.w, self.b = store, f"{name}.W", f"{name}.b"
        store.add(self.w, kaiming_uniform(rng, (n_in, n_out), n_in, scale))
        store.add(self.b, np.zeros(n_out))

    def forward(self, x):
        return ops.dense_forward(x, self.store[self.w], self.store[self.b])

    def backward(self, dy, cache):
        dx, dW, db = ops.dense_backward(dy, cache)
        self.store.accumulate(self.w, dW)
        self.store.accumulate(self.b, db)
        return dx


class Conv2d:
    def __init__(self, store: ParamStore, name: str, c_in: int, c_out: int, k: int, stride: int, rng):
        self.store, self.k, self.b, self.stride = store, f"{name}.K", f"{name}.b", stride
        store.add(self.k, kaiming_uniform(rng, (c_out, c_in, k, k), c_in * k * k))
        store.add(self.b, np.zeros(c_out))

    def forward(self, x):
        return ops.conv2d_forward(x, self.store[self.k], self.store[self.b], self.stride)

    def backward(self, dy, cache):
        dx, dK, db = ops.conv2d_backward(dy, cache)
        self.store.accumulate(self.k, dK)
        self.store.accumulate(self.b, db)
        return dx


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, d: int):
        self.store, self.g, self.b = store, f"{name}.g", f"{name}.b"
        store.add(self.g, np.ones(d))
        store.add(self.b, np.zeros(d))

    def forward(self, x):
        return ops.layernorm_forward(x, self.store[self.g], self.store[self.b])

    def backward(self, dy, cache):
        dx, dg, db = ops.layernorm_backward(dy, cache)
        self.store.accumulate(self.g, dg)
        self.store.accumulate(self.b, db)
        return dx


class Gelu:
    def forward(self, x):
        return ops.gelu_forward(x)

    def backward(self, dy, cache):
        return ops.gelu_backward(dy, cache)


class MLP:
    """Dense -> GELU -> Dense."""

    def __init__(self, store, name, n_in, n_hidden, n_out, rng, out_scale: float = 1.0):
        self.fc1 = Dense(store, f"{name}.fc1", n_in, n_hidden, rng)
        self.act = Gelu()
        self.fc2 = Dense(store, f"{name}.fc2", n_hidden, n_out, rng, out_scale)

    def forward(self, x):
        h, c1 = self.fc1.forward(x)
        a, c2 = self.act.forward(h)
        y, c3 = self.fc2.forward(a)
        return y, (c1, c2, c3)

    def backward(self, dy, cache):
        c1, c2, c3 = cache
        return self.fc1.backward(self.act.backward(self.fc2.backward(dy, c3), c2), c1)


class AttentionBlock:
    """Pre-norm transformer block with sinusoidal positions added at the input.

    x + PE -> LN -> single-head self-attention -> output projection -> residual
           -> LN -> Dense/GELU/Dense -> residual
    """

    def __init__(self, store: ParamStore, name: str, d: int, rng, hidden: int | None = None):
        self.store, self.name, self.d = store, name, d
        self.ln1 = LayerNorm(store, f"{name}.ln1", d)
        for p in ("Wq", "Wk", "Wv"):
            store.add(f"{name}.{p}", kaiming_uniform(rng, (d, d), d, 1.0 / np.sqrt(2.0)))
        self.proj = Dense(store, f"{name}.proj", d, d, rng, 1.0 / np.sqrt(2.0))
        self.ln2 = LayerNorm(store, f"{name}.ln2", d)
        self.mlp = MLP(store, f"{name}.mlp", d, hidden or 2 * d, d, rng, 1.0 / np.sqrt(2.0))

    def forward(self, x):
        if x.shape[-1] != self.d:
            raise ValueError(f"attention block expects width {self.d}, got {x.shape[-1]}")
        s = self.store
        x0 = x + ops.sinusoidal_encoding(x.shape[-2], self.d)
        a, c_ln1 = self.ln1.forward(x0)
        o, c_att = ops.attention_forward(a, s[f"{self.name}.Wq"], s[f"{self.name}.Wk"], s[f"{self.name}.Wv"])
        p, c_proj = self.proj.forward(o)
        h = x0 + p
        b, c_ln2 = self.ln2.forward(h)
        m, c_mlp = self.mlp.forward(b)
        return h + m, (c_ln1, c_att, c_proj, c_ln2, c_mlp)

    def attention_weights(self, x):
        s = self.store
        x0 = x + ops.sinusoidal_encoding(x.shape[-2], self.d)
        a, _ = self.ln1.forward(x0)
        return ops.attention_forward(a, s[f"{self.name}.Wq"], s[f"{self.name}.Wk"], s[f"{self.name}.Wv"])[1][4]

    def backward(self, dy, cache):
        c_ln1, c_att, c_proj, c_ln2, c_mlp = cache
        dh = dy + self.ln2.backward(self.mlp.backward(dy, c_mlp), c_ln2)
        do = self.proj.backward(dh, c_proj)
        da, g = ops.attention_backward(do, c_att)
        for k, v in g.items():
            self.store.accumulate(f"{self.name}.{k}", v)
        return dh + self.ln1.backward(da, c_ln1)
