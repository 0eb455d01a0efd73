"""NNCK checkpoint container: JSON manifest + float32 tensors in manifest order."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..containers import FormatError, read_container, write_container
from .params import ParamStore

MAGIC = b"NNCK"


def save_checkpoint(path: str | Path, store: ParamStore, **manifest) -> None:
    names = store.names()
    header = dict(manifest)
    header["names"] = names
    header["shapes"] = [list(store[n].shape) for n in names]
    header["step"] = store.step
    payload = np.concatenate([store[n].ravel() for n in names]) if names else np.zeros(0)
    write_container(path, MAGIC, header, payload)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    header, payload = read_container(path, MAGIC)
    tensors = {}
    i = 0
    for name, shape in zip(header["names"], header["shapes"]):
        n = int(np.prod(shape))
        if i + n > payload.size:
            raise FormatError(f"{path}: payload shorter than manifest")
        tensors[name] = payload[i : i + n].reshape(shape).astype(np.float64)
        i += n
    if i != payload.size:
        raise FormatError(f"{path}: payload longer than manifest")
    return header, tensors


def load_into(store: ParamStore, tensors: dict[str, np.ndarray]) -> None:
    missing = set(store.names()) ^ set(tensors)
    if missing:
        raise FormatError(f"checkpoint/parameter name mismatch: {sorted(missing)[:5]}")
    for name, value in tensors.items():
        if store[name].shape != value.shape:
            raise FormatError(f"shape mismatch for {name}: {store[name].shape} vs {value.shape}")
        store[name][...] = value
