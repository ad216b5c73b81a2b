"""Contextual Conformer-Transducer: parameters plus per-utterance forward passes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor_ops as ops
from .conformer import EncoderOutput, encode, init_encoder, subsampled_length
from .config import RunConfig
from .context_fusion import (EMBEDDING_METHODS, ContextCache, LayerContext, fuse_input_audio,
                             init_pooling)
from .errors import DimensionError
from .params import Initializer, ParamScope
from .tensor_ops import Tensor
from .transducer import greedy_decode, init_transducer, joint, predict, transducer_loss


@dataclass
class UtteranceResult:
    loss: Tensor
    encoder: EncoderOutput  # current-utterance span only


class ContextualTransducer:
    def __init__(self, cfg: RunConfig, params: Optional[dict] = None,
                 buffers: Optional[dict] = None, seed: Optional[int] = None):
        self.cfg = cfg.validate()
        if params is None:
            params, buffers = init_parameters(cfg, cfg.training.seed if seed is None else seed)
        self.params = params
        self.buffers = buffers if buffers is not None else {}

    @property
    def method(self) -> str:
        return self.cfg.fusion.method

    def new_cache(self) -> ContextCache:
        f = self.cfg.fusion
        if self.method == "none":
            return ContextCache(max_utterances=0)
        max_frames = f.context_frames if self.method == "chunked" else None
        return ContextCache(max_utterances=f.context_utterances, max_frames=max_frames)

    def scope(self, requires_grad: bool = False) -> ParamScope:
        return ParamScope(self.params, self.buffers, requires_grad)

    def commit(self, P: ParamScope):
        """Adopt batch-norm running statistics collected during a training pass."""
        self.buffers.update(P.bn_updates)
        P.bn_updates = {}

    def encode(self, features, cache: Optional[ContextCache], P: ParamScope,
               training: bool = False) -> EncoderOutput:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[1] != self.cfg.model.d_in:
            raise DimensionError(f"features must be [T x {self.cfg.model.d_in}], "
                                 f"got {features.shape}")
        spec = self.cfg.mask_spec()
        has_context = cache is not None and len(cache) > 0 and self.method != "none"
        if has_context and self.method == "input_concat":
            fused = fuse_input_audio(features, cache, self.cfg.fusion.context_utterances)
            out = encode(fused, P, self.cfg.model, spec, training=training)
            t_cur = subsampled_length(features.shape[0])
            span = slice(out.subsampled_length - t_cur, out.subsampled_length)
            return EncoderOutput([ops.getitem(h, span) for h in out.embeddings], t_cur)
        context = None
        if has_context and self.method in EMBEDDING_METHODS:
            context = LayerContext(self.method, cache, P, training)
        return encode(features, P, self.cfg.model, spec, context=context, training=training)

    def forward(self, features, labels, cache: Optional[ContextCache], P: ParamScope,
                training: bool = False) -> UtteranceResult:
        enc = self.encode(features, cache, P, training)
        logp = joint(enc.output, predict(labels, P, self.cfg.model), P)
        return UtteranceResult(transducer_loss(logp, labels), enc)

    def decode(self, features, cache: Optional[ContextCache] = None) -> tuple[list, EncoderOutput]:
        P = self.scope()
        enc = self.encode(features, cache, P, training=False)
        return greedy_decode(enc.output, P, self.cfg.model), enc

    def remember(self, cache: Optional[ContextCache], utterance_id: str, enc: EncoderOutput,
                 features):
        if cache is not None and self.method != "none":
            cache.update(utterance_id, enc.embeddings, np.asarray(features, dtype=np.float64))


def init_parameters(cfg: RunConfig, seed: int):
    """Parameters in a fixed order. Pooling weights use their own stream so
    switching fusion methods never perturbs the shared weights."""
    buffers: dict = {}
    init = Initializer(np.random.default_rng(seed))
    init_encoder(cfg.model, init, buffers)
    init_transducer(cfg.model, init)
    if cfg.fusion.method == "pooling":
        pool_init = Initializer(np.random.default_rng([seed, 1]), init.arrays)
        init_pooling(cfg.model.blocks, cfg.model.d_model, cfg.fusion.pool_len, pool_init, buffers)
    return init.arrays, buffers
