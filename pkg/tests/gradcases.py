"""Finite-difference harness shared by the unit and acceptance suites."""

import numpy as np

from rhythmotion.nn import MLP, AttentionBlock, Conv2d, Dense, Gelu, LayerNorm, ParamStore, grad_check


class _GeluLayer:
    def __init__(self, store, rng):
        self.g = Gelu()

    def forward(self, x):
        return self.g.forward(x)

    def backward(self, dy, cache):
        return self.g.backward(dy, cache)


# name -> (layer factory, input shape, relative tolerance)
CASES = {
    "dense": (lambda s, r: Dense(s, "d", 5, 4, r), (3, 5), 1e-4),
    "conv2d": (lambda s, r: Conv2d(s, "c", 2, 3, 3, 2, r), (2, 2, 7, 7), 1e-4),
    "gelu": (_GeluLayer, (4, 6), 1e-4),
    "layernorm": (lambda s, r: LayerNorm(s, "l", 6), (3, 6), 1e-4),
    "mlp": (lambda s, r: MLP(s, "m", 4, 6, 3, r), (3, 4), 1e-4),
    "attention": (lambda s, r: AttentionBlock(s, "a", 8, r), (2, 5, 8), 1e-3),
}


def layer_error(name: str, seed: int) -> float:
    """Max relative error of d<R, layer(x)> w.r.t. all parameters and x."""
    make, shape, _ = CASES[name]
    rng = np.random.default_rng(seed)
    store = ParamStore()
    layer = make(store, rng)
    # perturb LayerNorm gains/biases away from the trivial init
    for n in store.names():
        store[n][...] += 0.1 * rng.normal(size=store[n].shape)
    x = rng.normal(size=shape)
    y, _ = layer.forward(x)
    R = rng.normal(size=y.shape)
    n_p = store.n_params()

    def f(theta):
        if n_p:
            store.set_flat(theta[:n_p])
        store.zero_grad()
        y, cache = layer.forward(theta[n_p:].reshape(shape))
        dx = layer.backward(R, cache)
        grads = [store.flat_grad()] if n_p else []
        return float((y * R).sum()), np.concatenate(grads + [dx.ravel()])

    theta = np.concatenate(([store.flat()] if n_p else []) + [x.ravel()])
    return grad_check(f, theta)
