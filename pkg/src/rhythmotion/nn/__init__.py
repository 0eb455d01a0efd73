from .checkpoint import load_into, read_checkpoint, save_checkpoint
from .ops import (
    NonFiniteError,
    conv2d_backward,
    conv2d_forward,
    dense_backward,
    dense_forward,
    gelu,
    gelu_backward,
    gelu_forward,
    softmax,
)
from .params import (
    MLP,
    AttentionBlock,
    Conv2d,
    Dense,
    Gelu,
    LayerNorm,
    ParamStore,
    adam_step,
    grad_check,
)

__all__ = [
    "AttentionBlock",
    "Conv2d",
    "Dense",
    "Gelu",
    "LayerNorm",
    "MLP",
    "NonFiniteError",
    "ParamStore",
    "adam_step",
    "conv2d_backward",
    "conv2d_forward",
    "dense_backward",
    "dense_forward",
    "gelu",
    "gelu_backward",
    "gelu_forward",
    "grad_check",
    "load_into",
    "read_checkpoint",
    "save_checkpoint",
    "softmax",
]
