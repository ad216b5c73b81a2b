"""Cross-utterance context: the per-conversation cache and the fusion methods.

Methods, by config name:

* ``input_concat`` - previous utterances' features are prepended to the
  current features before the encoder runs.
* ``embed_concat`` - at every block, cached block outputs of previous
  utterances are prepended to the keys/values (never the queries).
* ``pooling`` - as ``embed_concat`` but each cached utterance is first
  attention-pooled to a fixed ``L x d`` summary with a learned matrix.
* ``chunked`` - as ``embed_concat`` with a frame cap on the visible context
  and the streaming chunk mask on the current utterance.

Cached tensors always enter the model through :func:`stop_gradient`.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor_ops as ops
from .attention_masks import AttentionMask, MaskSpec, build_current_mask, build_prev_mask, compose
from .errors import ConfigError, DimensionError
from .params import Initializer, ParamScope
from .tensor_ops import BN_MOMENTUM, BNState, Tensor

EMBEDDING_METHODS = ("embed_concat", "pooling", "chunked")


@dataclass
class CacheEntry:
    utterance_id: str
    features: Optional[np.ndarray]
    layers: tuple  # Tensor per encoder layer, index 0 = front-end output

    @property
    def num_frames(self) -> int:
        return self.layers[0].shape[0] if self.layers else 0


class ContextCache:
    """FIFO of the most recent utterances of one conversation, oldest first.

    ``max_utterances`` bounds the entry count; ``max_frames`` additionally
    evicts old entries once the newer ones alone cover that many frames.
    """

    def __init__(self, max_utterances: int = 1, max_frames: Optional[int] = None):
        if max_utterances < 0:
            raise ConfigError("cache capacity must be >= 0")
        self.max_utterances = max_utterances
        self.max_frames = max_frames
        self.entries: deque[CacheEntry] = deque()

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def utterance_ids(self) -> list:
        return [e.utterance_id for e in self.entries]

    def update(self, utterance_id: str, layers=(), features=None, detach: bool = True):
        if self.max_utterances == 0:
            return
        layers = tuple(ops.stop_gradient(h) if detach else h for h in layers)
        self.entries.append(CacheEntry(utterance_id, features, layers))
        while len(self.entries) > self.max_utterances:
            self.entries.popleft()
        if self.max_frames is not None:
            while len(self.entries) > 1 and \
                    sum(e.num_frames for e in list(self.entries)[1:]) >= self.max_frames:
                self.entries.popleft()

    def reset(self):
        self.entries.clear()


def cache_update(cache: ContextCache, utterance_id: str, encoder_output, features=None):
    cache.update(utterance_id, encoder_output.embeddings, features)


def cache_reset(cache: ContextCache):
    cache.reset()


def fuse_input_audio(current: np.ndarray, cache: ContextCache, max_utterances: int) -> np.ndarray:
    """Prepend the features of up to ``max_utterances`` cached utterances, oldest first."""
    current = np.asarray(current, dtype=np.float64)
    if max_utterances <= 0:
        return current
    prev = [e.features for e in list(cache.entries)[-max_utterances:] if e.features is not None]
    return np.concatenate(prev + [current], axis=0) if prev else current


def fuse_embedding_concat(layer: int, x_ffn, cache: ContextCache) -> Tensor:
    """Key/value source for block ``layer``: cached outputs (oldest first) then ``x_ffn``."""
    x_ffn = ops.as_tensor(x_ffn)
    context = [ops.stop_gradient(e.layers[layer]) for e in cache.entries]
    for c in context:
        if c.shape[1] != x_ffn.shape[1]:
            raise ConfigError(f"cached layer {layer} width {c.shape[1]} != {x_ffn.shape[1]}")
    return ops.concat(context + [x_ffn], axis=0)


@dataclass
class PoolingProjector:
    """Learned ``E [L x d]`` plus the batch-norm applied to ``relu(E H^T)``."""

    E: Tensor
    bn_gain: Tensor
    bn_bias: Tensor
    bn_state: BNState

    @property
    def length(self) -> int:
        return self.E.shape[0]

    @classmethod
    def from_scope(cls, P: ParamScope, layer: int) -> "PoolingProjector":
        p = f"pool.{layer}"
        return cls(P[p + ".E"], P[p + ".bn.g"], P[p + ".bn.b"], P.bn_state(p + ".bn"))


def init_pooling(blocks: int, d_model: int, pool_len: int, init: Initializer, buffers: dict):
    for layer in range(1, blocks + 1):
        p = f"pool.{layer}"
        init.normal(p + ".E", (pool_len, d_model), fan_in=d_model)
        init.layer_norm(p + ".bn", pool_len)
        buffers[p + ".bn"] = BNState.fresh(pool_len)


def pool_project(h_prev, proj: PoolingProjector, training: bool, momentum: float = BN_MOMENTUM):
    """Summarise ``h_prev [T x d]`` as ``L x d``.

    ``A = softmax_time(BN(relu(E SG(H)^T)))`` and the result is ``A SG(H)``.
    Returns ``(pooled, A, new_bn_state)``.
    """
    h = ops.stop_gradient(h_prev)
    scores = ops.relu(ops.matmul(proj.E, ops.transpose(h)))
    normed, state = ops.batch_norm_1d(scores, proj.bn_gain, proj.bn_bias, proj.bn_state, training,
                                        momentum=momentum)
    weights = ops.softmax(normed)
    return ops.matmul(weights, h), weights.data, state


def chunked_mask_pair(spec: MaskSpec, num_frames: int, cache: ContextCache):
    """``(M_prev, M_cur)`` for the current utterance given what is cached."""
    lengths = [e.num_frames for e in reversed(cache.entries)]
    spec = spec.with_prev(lengths)
    return build_prev_mask(spec, num_frames), build_current_mask(spec, num_frames)


def fuse_chunked(layer: int, x_ffn, cache: ContextCache, mask_pair):
    """Same key/value assembly as ``embed_concat``; returns ``(kv, composed_mask)``."""
    kv = fuse_embedding_concat(layer, x_ffn, cache)
    prev, cur = mask_pair
    mask: AttentionMask = compose(prev, cur)
    if mask.num_keys != kv.shape[0] or mask.num_queries != ops.as_tensor(x_ffn).shape[0]:
        raise DimensionError(f"mask {mask.allow.shape} does not fit {x_ffn.shape[0]} queries "
                          f"x {kv.shape[0]} keys")
    return kv, mask


class LayerContext:
    """Per-layer context provider handed to :func:`crossutt.conformer.encode`."""

    def __init__(self, method: str, cache: ContextCache, P: Optional[ParamScope] = None,
                 training: bool = False):
        if method not in EMBEDDING_METHODS:
            raise ConfigError(f"{method!r} does not fuse encoder embeddings")
        self.method = method
        self.cache = cache
        self.P = P
        self.training = training

    def prev_lengths(self) -> list:
        """Context rows contributed by each cached utterance, most recent first."""
        if self.method == "pooling":
            length = self.P["pool.1.E"].shape[0]
            return [length] * len(self.cache)
        return [e.num_frames for e in reversed(self.cache.entries)]

    def fuse(self, layer: int, x_ffn) -> Tensor:
        if self.method != "pooling":
            return fuse_embedding_concat(layer, x_ffn, self.cache)
        proj = PoolingProjector.from_scope(self.P, layer)
        pooled = []
        for e in self.cache.entries:
            out, _, state = pool_project(e.layers[layer], proj, self.training,
                                          self.P.bn_momentum)
            if self.training:
                self.P.bn_updates[f"pool.{layer}.bn"] = state
                proj.bn_state = state
            pooled.append(out)
        return ops.concat(pooled + [ops.as_tensor(x_ffn)], axis=0)
