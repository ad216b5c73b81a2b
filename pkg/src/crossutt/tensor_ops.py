"""Dense float64 kernels with tape-based reverse-mode differentiation.

Values live in :class:`Tensor` objects wrapping a numpy array. When a
:class:`Tape` is active, every primitive whose inputs require gradients appends
``(output, inputs, backward_fn)`` to it; :meth:`Tape.backward` replays the
entries in reverse. With no tape active the same functions are plain numpy
evaluations, which is what inference and finite-difference probes use.

Stop-gradient is :func:`stop_gradient`: a fresh constant sharing the data, so
nothing upstream of it is reachable from the loss.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import DegenerateRowError, DimensionError, LengthError

LN_EPS = 1e-5
BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A float64 array plus an optional gradient accumulator.

    Leaves created with ``requires_grad=True`` start with a zero gradient;
    intermediate results get their gradient lazily during backward.
    """

    __slots__ = ("data", "grad", "requires_grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def numpy(self) -> np.ndarray:
        return self.data

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Records primitive ops executed inside ``with Tape() as tape:``."""

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()
        return False

    def backward(self, loss: Tensor, seed=None):
        if seed is None:
            if loss.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar loss")
            seed = np.ones_like(loss.data)
        loss.grad = np.asarray(seed, dtype=np.float64) if loss.grad is None else loss.grad + seed
        for out, inputs, backward_fn in reversed(self.entries):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for inp, g in zip(inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                inp.grad = g if inp.grad is None else inp.grad + g


def op(data, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of a primitive and record it if needed.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per input.
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.entries.append((out, tuple(inputs), backward_fn))
    return out


def stop_gradient(x) -> Tensor:
    return Tensor(as_tensor(x).data)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise / structural

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return op(a.data + b.data, (a, b),
              lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return op(a.data - b.data, (a, b),
              lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return op(a.data * b.data, (a, b),
              lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    return op(a.data * c, (a,), lambda g: (g * c,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return op(y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return op(np.log(a.data), (a,), lambda g: (g / a.data,))


def total(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return op(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), backward)


def matmul(a, b) -> Tensor:
    """``c[..., i, j] = sum_p a[..., i, p] * b[..., p, j]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return op(a.data @ b.data, (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    y = matmul(x, w)
    return y if b is None else add(y, b)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return op(np.transpose(a.data, axes).copy(), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len(tensors) == 1:
        return tensors[0]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return op(np.concatenate([t.data for t in tensors], axis=axis), tensors,
              lambda g: tuple(np.split(g, bounds, axis=axis)))


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return op(a.data[idx], (a,), backward)


# activations

def relu(a) -> Tensor:
    a = as_tensor(a)
    on = a.data > 0
    return op(np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def _sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return op(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return op(y, (a,), lambda g: (g * (1.0 - y * y),))


def swish(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return op(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),))


def glu(a) -> Tensor:
    """Gated linear unit over the last axis: ``x = [a | b] -> a * sigmoid(b)``."""
    a = as_tensor(a)
    d2 = a.shape[-1]
    if d2 % 2:
        raise DimensionError(f"glu needs an even channel count, got {d2}")
    d = d2 // 2
    lin, gate = a.data[..., :d], a.data[..., d:]
    s = _sigmoid(gate)

    def backward(g):
        return (np.concatenate([g * s, g * lin * s * (1.0 - s)], axis=-1),)

    return op(lin * s, (a,), backward)


# normalisers

def masked_softmax(logits, mask=None) -> Tensor:
    """Softmax over the last axis restricted to ``mask`` (True = allowed).

    Disallowed entries come out as exact zeros, so values sitting behind the
    mask can never leak into the result.
    """
    logits = as_tensor(logits)
    x = logits.data
    if mask is None:
        z = x
    else:
        mask = np.asarray(mask, dtype=bool)
        try:
            allowed = np.broadcast_to(mask, x.shape)
        except ValueError:
            raise DimensionError(f"mask {mask.shape} does not fit logits {x.shape}") from None
        if not allowed.any(axis=-1).all():
            raise DegenerateRowError("masked_softmax: a row has no allowed entries")
        z = np.where(allowed, x, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return op(y, (logits,), backward)


def softmax(logits) -> Tensor:
    return masked_softmax(logits, None)


def log_softmax(a) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=-1, keepdims=True)
    shifted = a.data - m
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(y)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return op(y, (a,), backward)


def layer_norm(x, gain, bias, eps: float = LN_EPS) -> Tensor:
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm affine {gain.shape}/{bias.shape} vs width {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        dxhat = g * gain.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return op(xhat * gain.data + bias.data, (x, gain, bias), backward)


@dataclass(frozen=True)
class BNState:
    """Running statistics for one batch-norm layer (one entry per channel)."""

    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, channels: int) -> "BNState":
        return cls(np.zeros(channels), np.ones(channels))


def batch_norm_1d(x, gain, bias, state: BNState, training: bool,
                  momentum: float = BN_MOMENTUM, eps: float = BN_EPS):
    """Normalise each row (channel) of ``x[C x t]`` over the t axis.

    Returns ``(y, new_state)``. In training mode batch statistics are used and
    the running estimate moves toward them; eval mode only reads ``state``.
    The biased variance feeds both paths so a converged running estimate
    reproduces training-mode outputs.
    """
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    if x.ndim != 2:
        raise DimensionError(f"batch_norm_1d expects [C x t], got {x.shape}")
    c = x.shape[0]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError("batch_norm_1d affine/channel mismatch")
    g_col, b_col = gain.data[:, None], bias.data[:, None]
    if not training:
        inv = 1.0 / np.sqrt(state.var + eps)[:, None]
        xhat = (x.data - state.mean[:, None]) * inv

        def backward_eval(g):
            return g * g_col * inv, (g * xhat).sum(axis=1), g.sum(axis=1)

        return op(xhat * g_col + b_col, (x, gain, bias), backward_eval), state

    mu = x.data.mean(axis=1)
    xc = x.data - mu[:, None]
    var = (xc * xc).mean(axis=1)
    inv = 1.0 / np.sqrt(var + eps)[:, None]
    xhat = xc * inv

    def backward(g):
        dxhat = g * g_col
        dx = inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=1), g.sum(axis=1)

    new_state = BNState((1.0 - momentum) * state.mean + momentum * mu,
                        (1.0 - momentum) * state.var + momentum * var)
    return op(xhat * g_col + b_col, (x, gain, bias), backward), new_state


# convolutions

def pointwise_conv1d(x, w, b=None) -> Tensor:
    """Kernel-size-1 convolution over ``x[T x C_in]``; ``w`` is ``[C_in x C_out]``."""
    return linear(x, w, b)


def depthwise_conv1d(x, w, b=None, causal: bool = False) -> Tensor:
    """Per-channel convolution along time; ``x[T x C]``, ``w[K x C]``.

    Output keeps length T. Symmetric padding needs odd K; ``causal`` pads on
    the left only so frame t sees frames ``t-K+1 .. t``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or w.shape[1] != x.shape[1]:
        raise DimensionError(f"depthwise_conv1d shapes {x.shape} / {w.shape}")
    k = w.shape[0]
    if causal:
        left, right = k - 1, 0
    else:
        if k % 2 == 0:
            raise DimensionError("symmetric depthwise conv needs an odd kernel")
        left = right = k // 2
    t = x.shape[0]
    if t < 1:
        raise LengthError("depthwise_conv1d on empty input")
    xp = np.pad(x.data, ((left, right), (0, 0)))
    out = np.zeros_like(x.data)
    for j in range(k):
        out += xp[j:j + t] * w.data[j]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        for j in range(k):
            gxp[j:j + t] += g * w.data[j]
            gw[j] = (g * xp[j:j + t]).sum(axis=0)
        return gxp[left:left + t], gw

    y = op(out, (x, w), backward)
    return y if b is None else add(y, b)


def conv2d(x, w, b=None, stride=(1, 1), padding=((0, 0), (0, 0))) -> Tensor:
    """Cross-correlation of ``x[C_in x H x W]`` with ``w[C_out x C_in x kh x kw]``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 4 or w.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d shapes {x.shape} / {w.shape}")
    (pt, pb), (pl, pr) = padding
    sh, sw = stride
    _, kh, kw = w.shape[1:]
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr)))
    ho = (xp.shape[1] - kh) // sh + 1
    wo = (xp.shape[2] - kw) // sw + 1
    if ho < 1 or wo < 1:
        raise LengthError(f"conv2d input {x.shape[1:]} shorter than kernel {(kh, kw)}")
    windows = [(slice(i, i + sh * (ho - 1) + 1, sh), slice(j, j + sw * (wo - 1) + 1, sw))
               for i in range(kh) for j in range(kw)]
    # im2col: [C_in, kh*kw, ho*wo]
    cols = np.stack([xp[:, ti, tj] for ti, tj in windows], axis=1).reshape(x.shape[0] * kh * kw, -1)
    w2 = w.data.reshape(w.shape[0], -1)
    out = (w2 @ cols).reshape(w.shape[0], ho, wo)

    def backward(g):
        g2 = g.reshape(g.shape[0], -1)
        gw = (g2 @ cols.T).reshape(w.shape)
        gcols = (w2.T @ g2).reshape(x.shape[0], kh * kw, ho, wo)
        gxp = np.zeros_like(xp)
        for n, (ti, tj) in enumerate(windows):
            gxp[:, ti, tj] += gcols[:, n]
        return gxp[:, pt:pt + x.shape[1], pl:pl + x.shape[2]], gw

    y = op(out, (x, w), backward)
    return y if b is None else add(y, reshape(b, (-1, 1, 1)))


def conv2d_stride2(x, w, b=None, causal: bool = False) -> Tensor:
    """3x3, stride-2 conv; time is axis 1. Pads 1/1 or, if ``causal``, 2/0 in time.

    Either way the time length becomes ``ceil(H / 2)``.
    """
    x = as_tensor(x)
    if w.shape[2:] != (3, 3):
        raise DimensionError("conv2d_stride2 expects a 3x3 kernel")
    time_pad = (2, 0) if causal else (1, 1)
    return conv2d(x, w, b, stride=(2, 2), padding=(time_pad, (1, 1)))
