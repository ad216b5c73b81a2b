"""Conformer encoder: stride-4 convolutional front-end and a stack of blocks.

Each block runs, in order:

    x = h + FFN(h) / 2
    x = x + MHSA(q = x Wq, k = x' Wk, v = x' Wv)   # x' = x, or cached context ++ x
    x = x + CONV(x)
    h = LN(x + FFN(x) / 2)

Queries always come from the current utterance only. The feed-forward and
convolution modules carry their own pre-norm; attention projects ``x``
directly so cached block outputs can be concatenated to it unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import tensor_ops as ops
from .attention_masks import MaskSpec, build_mask
from .config import ModelConfig
from .errors import DimensionError, LengthError
from .params import Initializer, ParamScope
from .tensor_ops import BNState, Tensor


@dataclass
class EncoderOutput:
    embeddings: list  # Tensor[T' x d] per layer; index 0 is the front-end output
    subsampled_length: int

    @property
    def output(self) -> Tensor:
        return self.embeddings[-1]


def subsampled_length(num_frames: int) -> int:
    return math.ceil(math.ceil(num_frames / 2) / 2)


def init_encoder(cfg: ModelConfig, init: Initializer, buffers: dict):
    c, d = cfg.subsample_channels, cfg.d_model
    init.normal("sub.conv1.w", (c, 1, 3, 3), fan_in=9)
    init.zeros("sub.conv1.b", (c,))
    init.normal("sub.conv2.w", (c, c, 3, 3), fan_in=9 * c)
    init.zeros("sub.conv2.b", (c,))
    init.normal("sub.out.w", (c * cfg.subsampled_freq, d))
    init.zeros("sub.out.b", (d,))
    hidden = cfg.ffn_mult * d
    for layer in range(1, cfg.blocks + 1):
        p = f"enc.{layer}."
        for ffn in ("ffn1", "ffn2"):
            init.layer_norm(p + ffn + ".ln", d)
            init.normal(p + ffn + ".w1", (d, hidden))
            init.zeros(p + ffn + ".b1", (hidden,))
            init.normal(p + ffn + ".w2", (hidden, d))
            init.zeros(p + ffn + ".b2", (d,))
        for w in ("wq", "wk", "wv", "wo"):
            init.normal(p + "attn." + w, (d, d))
        init.zeros(p + "attn.bo", (d,))
        init.layer_norm(p + "conv.ln", d)
        init.normal(p + "conv.pw1", (d, 2 * d))
        init.zeros(p + "conv.pw1_b", (2 * d,))
        init.normal(p + "conv.pw2", (d, d))
        init.zeros(p + "conv.pw2_b", (d,))
        init.normal(p + "conv.dw", (cfg.conv_kernel, d), fan_in=cfg.conv_kernel)
        init.layer_norm(p + "conv.bn", d)
        buffers[p + "conv.bn"] = BNState.fresh(d)
        init.normal(p + "conv.pw3", (d, d))
        init.zeros(p + "conv.pw3_b", (d,))
        init.layer_norm(p + "ln_out", d)


def positional_encoding(num_frames: int, d: int) -> np.ndarray:
    pos = np.arange(num_frames)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    pe = np.zeros((num_frames, d))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate)[:, : d // 2]
    return pe


def subsample(features, P: ParamScope, cfg: ModelConfig, streaming: bool = False) -> Tensor:
    """``[T x D_in]`` features to ``[ceil(ceil(T/2)/2) x d_model]`` embeddings.

    Two 3x3 stride-2 convolutions with ReLU, a linear map to d_model, and an
    additive sinusoidal position code. ``streaming`` pads time on the left only.
    """
    x = ops.as_tensor(features)
    if x.ndim != 2 or x.shape[1] != cfg.d_in:
        raise DimensionError(f"features must be [T x {cfg.d_in}], got {x.shape}")
    if x.shape[0] < 4:
        raise LengthError(f"utterance of {x.shape[0]} frames is shorter than the 4-frame minimum")
    y = ops.reshape(x, (1,) + x.shape)
    y = ops.relu(ops.conv2d_stride2(y, P["sub.conv1.w"], P["sub.conv1.b"], causal=streaming))
    y = ops.relu(ops.conv2d_stride2(y, P["sub.conv2.w"], P["sub.conv2.b"], causal=streaming))
    c, t, f = y.shape
    y = ops.reshape(ops.transpose(y, (1, 0, 2)), (t, c * f))
    y = ops.linear(y, P["sub.out.w"], P["sub.out.b"])
    return ops.add(y, positional_encoding(t, cfg.d_model))


def feed_forward(x, P: ParamScope, prefix: str) -> Tensor:
    y = ops.layer_norm(x, P[prefix + ".ln.g"], P[prefix + ".ln.b"])
    y = ops.swish(ops.linear(y, P[prefix + ".w1"], P[prefix + ".b1"]))
    return ops.linear(y, P[prefix + ".w2"], P[prefix + ".b2"])


def multi_head_attention(x, kv, P: ParamScope, prefix: str, heads: int, allow) -> Tensor:
    """Scaled dot-product attention of queries from ``x`` over keys/values from ``kv``."""
    t, d = x.shape
    k_len = kv.shape[0]
    allow = np.asarray(allow, dtype=bool)
    if allow.shape != (t, k_len):
        raise DimensionError(f"mask {allow.shape} does not match {t} queries x {k_len} keys")
    dh = d // heads

    def split(m):  # [n x d] -> [heads x n x dh]
        return ops.transpose(ops.reshape(m, (m.shape[0], heads, dh)), (1, 0, 2))

    q = split(ops.matmul(x, P[prefix + ".wq"]))
    k = split(ops.matmul(kv, P[prefix + ".wk"]))
    v = split(ops.matmul(kv, P[prefix + ".wv"]))
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    att = ops.masked_softmax(scores, allow[None])
    ctx = ops.reshape(ops.transpose(ops.matmul(att, v), (1, 0, 2)), (t, d))
    return ops.linear(ctx, P[prefix + ".wo"], P[prefix + ".bo"])


def conv_module(x, P: ParamScope, prefix: str, streaming: bool, training: bool) -> Tensor:
    """LN, pointwise + GLU, pointwise, depthwise, BN, Swish, pointwise."""
    y = ops.layer_norm(x, P[prefix + ".ln.g"], P[prefix + ".ln.b"])
    y = ops.glu(ops.pointwise_conv1d(y, P[prefix + ".pw1"], P[prefix + ".pw1_b"]))
    y = ops.pointwise_conv1d(y, P[prefix + ".pw2"], P[prefix + ".pw2_b"])
    y = ops.depthwise_conv1d(y, P[prefix + ".dw"], None, causal=streaming)  # BN absorbs a bias
    bn_name = prefix + ".bn"
    y, state = ops.batch_norm_1d(ops.transpose(y), P[bn_name + ".g"], P[bn_name + ".b"],
                                 P.bn_state(bn_name), training, momentum=P.bn_momentum)
    if training:
        P.bn_updates[bn_name] = state
    y = ops.swish(ops.transpose(y))
    return ops.pointwise_conv1d(y, P[prefix + ".pw3"], P[prefix + ".pw3_b"])


def conformer_block(h, P: ParamScope, layer: int, cfg: ModelConfig, allow,
                    fuse: Optional[Callable[[Tensor], Tensor]] = None,
                    streaming: bool = False, training: bool = False) -> Tensor:
    """One block. ``fuse(x_ffn)`` returns the key/value source (context ++ x_ffn)."""
    p = f"enc.{layer}."
    x = ops.add(h, ops.scale(feed_forward(h, P, p + "ffn1"), 0.5))
    kv = x if fuse is None else fuse(x)
    x = ops.add(x, multi_head_attention(x, kv, P, p + "attn", cfg.heads, allow))
    x = ops.add(x, conv_module(x, P, p + "conv", streaming, training))
    x = ops.add(x, ops.scale(feed_forward(x, P, p + "ffn2"), 0.5))
    return ops.layer_norm(x, P[p + "ln_out.g"], P[p + "ln_out.b"])


def encode(features, P: ParamScope, cfg: ModelConfig, mask_spec: MaskSpec,
           context=None, training: bool = False) -> EncoderOutput:
    """Run the front-end and every block, keeping each layer's output.

    ``context`` (see :mod:`crossutt.context_fusion`) supplies per-layer cached
    embeddings; it must expose ``prev_lengths()`` (most recent first) and
    ``fuse(layer, x_ffn)``. Without it, or with an empty one, this is the
    plain non-contextual encoder.
    """
    streaming = mask_spec.streaming
    h = subsample(features, P, cfg, streaming)
    t = h.shape[0]
    lengths = tuple(context.prev_lengths()) if context is not None else ()
    fuse_layer = None
    if sum(lengths) == 0:
        lengths = ()
    else:
        fuse_layer = context.fuse
    allow = build_mask(mask_spec.with_prev(lengths), t).allow
    embeddings = [h]
    for layer in range(1, cfg.blocks + 1):
        fuse = None if fuse_layer is None else (lambda x, _l=layer: fuse_layer(_l, x))
        h = conformer_block(h, P, layer, cfg, allow, fuse, streaming, training)
        embeddings.append(h)
    return EncoderOutput(embeddings, t)
