"""Named parameter arrays and the per-forward view that turns them into Tensors."""

from __future__ import annotations

import numpy as np

from .tensor_ops import BN_MOMENTUM, BNState, Tensor


class ParamScope:
    """Lazily wraps named arrays as Tensors for one forward pass.

    With ``requires_grad`` every parameter touched becomes a leaf whose
    gradient can be read back through :meth:`grads` after backward.
    Batch-norm states are read from ``buffers``; training-mode updates are
    collected in ``bn_updates`` and only committed by the caller.
    """

    def __init__(self, arrays: dict, buffers: dict | None = None, requires_grad: bool = False):
        self.arrays = arrays
        self.buffers = buffers if buffers is not None else {}
        self.requires_grad = requires_grad
        self.tensors: dict[str, Tensor] = {}
        self.bn_updates: dict[str, BNState] = {}
        self.bn_momentum = BN_MOMENTUM  # 1.0 makes bn_updates hold raw batch statistics

    def __getitem__(self, name: str) -> Tensor:
        t = self.tensors.get(name)
        if t is None:
            t = self.tensors[name] = Tensor(self.arrays[name], requires_grad=self.requires_grad)
        return t

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def bn_state(self, name: str) -> BNState:
        return self.bn_updates.get(name) or self.buffers[name]

    def grads(self) -> dict:
        return {n: t.grad for n, t in self.tensors.items() if t.grad is not None}


class Initializer:
    """Deterministic parameter factory writing into an ordered dict."""

    def __init__(self, rng: np.random.Generator, arrays: dict | None = None):
        self.rng = rng
        self.arrays = arrays if arrays is not None else {}

    def normal(self, name, shape, fan_in=None):
        fan_in = fan_in or shape[0]
        self.arrays[name] = self.rng.standard_normal(shape) / np.sqrt(fan_in)

    def zeros(self, name, shape):
        self.arrays[name] = np.zeros(shape)

    def ones(self, name, shape):
        self.arrays[name] = np.ones(shape)

    def layer_norm(self, prefix, d):
        self.ones(prefix + ".g", (d,))
        self.zeros(prefix + ".b", (d,))
