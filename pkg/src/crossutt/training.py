"""Desk-scale training, decoding and finite-difference gradient checking."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import scheduler
from . import tensor_ops as ops
from .errors import ConfigError, NumericError
from .features import read_features
from .model import ContextualTransducer
from .tensor_ops import Tape
from .transducer import edit_distance

log = logging.getLogger(__name__)


class Adam:
    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.98, eps=1e-9):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, g in grads.items():
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            self.params[name] = self.params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def preload(manifest: scheduler.Manifest, loader=read_features) -> Callable[[str], np.ndarray]:
    cache = {u.feature_ref: loader(u.feature_ref) for _, u in manifest.utterances()}
    return cache.__getitem__


def check_resolution(model: ContextualTransducer, features: np.ndarray, utterance_id: str):
    if features.ndim != 2 or features.shape[1] != model.cfg.model.d_in:
        raise ConfigError(f"utterance {utterance_id}: features are {features.shape}, model expects "
                          f"[T x {model.cfg.model.d_in}]")


@dataclass
class TrainResult:
    losses: list = field(default_factory=list)
    plan: Optional[scheduler.BatchPlan] = None


def train(model: ContextualTransducer, manifest: scheduler.Manifest, steps: Optional[int] = None,
          loader: Optional[Callable[[str], np.ndarray]] = None,
          on_step: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Optimise on ``manifest`` for ``steps`` optimiser steps.

    Each step consumes one step of the batch plan (all rows); the plan is
    replayed as many times as needed. The recorded loss is the mean
    per-utterance transducer loss of the step. Caches are per row and follow
    the plan's reset directives. The last ``training.bn_freeze_steps`` steps
    run batch norm on recalibrated running statistics (see
    :func:`recalibrate_batch_norm`) so training ends in the inference regime.
    """
    cfg = model.cfg
    steps = cfg.training.steps if steps is None else steps
    loader = loader or preload(manifest)
    sc = cfg.scheduler
    bplan = scheduler.plan(manifest, sc.rows, sc.capacity, sc.splicing)
    result = TrainResult(plan=bplan)
    if bplan.num_steps == 0 or steps == 0:
        return result
    opt = Adam(model.params, cfg.training.lr, cfg.training.beta1, cfg.training.beta2,
               cfg.training.adam_eps)
    caches = [model.new_cache() for _ in range(bplan.rows)]
    freeze_at = max(0, steps - cfg.training.bn_freeze_steps)
    step = 0
    while step < steps:
        items = list(scheduler.iterate(bplan, manifest, loader))
        for plan_step in range(bplan.num_steps):
            if step >= steps:
                break
            if step == freeze_at and cfg.training.bn_freeze_steps:
                recalibrate_batch_norm(model, manifest, loader)
            bn_training = step < freeze_at
            P = model.scope(requires_grad=True)
            losses = []
            with Tape() as tape:
                for item in items:
                    if item.step != plan_step:
                        continue
                    cache = caches[item.row]
                    for seg in item.segments:
                        check_resolution(model, seg.features, seg.utterance.utterance_id)
                        if seg.directive == "reset":
                            cache.reset()
                        res = model.forward(seg.features, seg.labels, cache, P, training=bn_training)
                        losses.append(res.loss)
                        model.remember(cache, seg.utterance.utterance_id, res.encoder, seg.features)
                total = losses[0]
                for extra in losses[1:]:
                    total = ops.add(total, extra)
                mean = ops.scale(total, 1.0 / len(losses))
            value = float(mean.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at step {step}")
            tape.backward(mean)
            opt.step(P.grads())
            model.commit(P)
            result.losses.append(value)
            if on_step is not None:
                on_step(step, value)
            step += 1
    return result


@dataclass
class DecodeReport:
    hypotheses: list = field(default_factory=list)  # (utterance_id, hyp, ref)
    errors: int = 0
    ref_tokens: int = 0

    @property
    def token_error_rate(self) -> float:
        return self.errors / max(1, self.ref_tokens)


def decode(model: ContextualTransducer, manifest: scheduler.Manifest,
           loader: Optional[Callable[[str], np.ndarray]] = None) -> DecodeReport:
    """Greedy-decode every utterance, conversation by conversation, in order."""
    loader = loader or read_features
    report = DecodeReport()
    for conv in manifest.conversations:
        cache = model.new_cache()
        for utt in conv.utterances:
            feats = loader(utt.feature_ref)
            check_resolution(model, feats, utt.utterance_id)
            hyp, enc = model.decode(feats, cache)
            model.remember(cache, utt.utterance_id, enc, feats)
            ref = list(utt.label_ids)
            report.hypotheses.append((utt.utterance_id, hyp, ref))
            report.errors += edit_distance(hyp, ref)
            report.ref_tokens += len(ref)
    return report


def recalibrate_batch_norm(model: ContextualTransducer, manifest: scheduler.Manifest,
                           loader: Optional[Callable[[str], np.ndarray]] = None):
    """Replace running batch-norm statistics with population averages.

    Training normalises each utterance with its own statistics, and with a
    handful of frames per utterance the momentum estimate left behind by
    training is a noisy stand-in. This pass re-runs the training-mode forward
    over ``manifest`` (conversation order, caches maintained) and stores the
    mean of the per-utterance batch means and variances, so inference sees
    the statistics training actually normalised with on average.
    """
    loader = loader or read_features
    sums: dict = {}
    for conv in manifest.conversations:
        cache = model.new_cache()
        for utt in conv.utterances:
            feats = loader(utt.feature_ref)
            check_resolution(model, feats, utt.utterance_id)
            P = model.scope()
            P.bn_momentum = 1.0
            enc = model.encode(feats, cache, P, training=True)
            model.remember(cache, utt.utterance_id, enc, feats)
            for name, st in P.bn_updates.items():
                acc = sums.setdefault(name, [0, 0.0, 0.0])
                acc[0] += 1
                acc[1] = acc[1] + st.mean
                acc[2] = acc[2] + st.var
    for name, (n, mean, var) in sums.items():
        model.buffers[name] = ops.BNState(mean / n, var / n)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)`` elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(model: ContextualTransducer, loss_fn, eps: float = 1e-6,
                            names=None, floor: float = 1e-6) -> dict:
    """Compare tape gradients with central differences for every parameter element.

    ``loss_fn(scope)`` must build the scalar loss from a :class:`ParamScope`.
    Returns ``{name: max relative error}``.
    """
    P = model.scope(requires_grad=True)
    with Tape() as tape:
        loss = loss_fn(P)
    tape.backward(loss)
    grads = {n: t.grad for n, t in P.tensors.items()}
    names = list(grads) if names is None else list(names)
    worst = {}
    for name in names:
        arr = model.params[name]
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(loss_fn(model.scope()).data)
            flat[i] = orig - eps
            down = float(loss_fn(model.scope()).data)
            flat[i] = orig
            numeric.reshape(-1)[i] = (up - down) / (2 * eps)
        worst[name] = float(relative_error(grads[name], numeric, floor).max())
    return worst


def gradcheck_setup(seed: int = 0):
    """The contextual gradient-check configuration: 2 blocks, d=8, 2 heads,
    embedding concatenation with one cached utterance."""
    from .config import FusionConfig, ModelConfig, RunConfig

    cfg = RunConfig(
        model=ModelConfig(blocks=2, d_model=8, heads=2, conv_kernel=3, d_in=8,
                          subsample_channels=2, predictor_embed=4, predictor_units=4,
                          joint_dim=8, vocab=4),
        fusion=FusionConfig(method="embed_concat", context_utterances=1),
    )
    model = ContextualTransducer(cfg, seed=seed)
    rng = np.random.default_rng(seed + 100)
    prev = rng.standard_normal((12, 8))
    cur = rng.standard_normal((12, 8))
    labels = [1, 3]
    cache = model.new_cache()
    _, prev_enc = model.decode(prev)
    model.remember(cache, "prev", prev_enc, prev)

    def loss_fn(P):
        return model.forward(cur, labels, cache, P, training=True).loss

    return model, loss_fn
