"""Checkpoint container: ``model.bin`` holds raw float64 arrays back to back,
``model.index`` lists ``name<TAB>shape<TAB>offset`` per array, and
``config.ini`` records the run configuration. Batch-norm running statistics
are stored as ``<layer>.running_mean`` / ``<layer>.running_var`` arrays.
"""

from __future__ import annotations

import os

import numpy as np

from . import config as config_io
from .errors import ConfigError
from .tensor_ops import BNState

BIN, INDEX, CONFIG = "model.bin", "model.index", "config.ini"


def save_arrays(arrays: dict, bin_path, index_path):
    offset = 0
    lines = []
    with open(bin_path, "wb") as fh:
        for name, arr in arrays.items():
            data = np.asarray(arr, dtype="<f8")  # tobytes() is C-ordered; keeps 0-d shapes
            fh.write(data.tobytes())
            shape = "x".join(str(n) for n in data.shape) or "scalar"
            lines.append(f"{name}\t{shape}\t{offset}")
            offset += data.nbytes
    with open(index_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_arrays(bin_path, index_path) -> dict:
    raw = np.fromfile(bin_path, dtype="<f8")
    arrays = {}
    with open(index_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                name, shape, offset = line.rstrip("\n").split("\t")
                dims = () if shape == "scalar" else tuple(int(n) for n in shape.split("x"))
                start = int(offset) // 8
            except ValueError:
                raise ConfigError(f"{index_path}:{lineno}: malformed index line") from None
            size = int(np.prod(dims))
            if start + size > raw.size:
                raise ConfigError(f"{index_path}:{lineno}: {name} runs past end of {bin_path}")
            arrays[name] = raw[start:start + size].reshape(dims).copy()
    return arrays


def save_checkpoint(directory, model):
    os.makedirs(directory, exist_ok=True)
    arrays = dict(model.params)
    for name, state in model.buffers.items():
        arrays[name + ".running_mean"] = state.mean
        arrays[name + ".running_var"] = state.var
    save_arrays(arrays, os.path.join(directory, BIN), os.path.join(directory, INDEX))
    config_io.save(model.cfg, os.path.join(directory, CONFIG))


def load_checkpoint(directory):
    from .model import ContextualTransducer

    cfg_path = os.path.join(directory, CONFIG)
    if not os.path.exists(cfg_path):
        raise ConfigError(f"{directory} is not a checkpoint (no {CONFIG})")
    cfg = config_io.load(cfg_path)
    arrays = load_arrays(os.path.join(directory, BIN), os.path.join(directory, INDEX))
    params, buffers = {}, {}
    for name in list(arrays):
        if name.endswith(".running_mean"):
            base = name[: -len(".running_mean")]
            buffers[base] = BNState(arrays.pop(name), arrays.pop(base + ".running_var"))
    for name, arr in arrays.items():
        if not name.endswith(".running_var"):
            params[name] = arr
    return ContextualTransducer(cfg, params=params, buffers=buffers)
