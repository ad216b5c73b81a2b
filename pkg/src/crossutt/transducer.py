"""Predictor, joint network, transducer loss and greedy decoding.

Token 0 is blank; it doubles as the predictor's start symbol.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor_ops as ops
from .config import ModelConfig
from .errors import NumericError, VocabError
from .params import Initializer, ParamScope
from .tensor_ops import Tensor

BLANK = 0
MAX_SYMBOLS_PER_FRAME = 10


def init_transducer(cfg: ModelConfig, init: Initializer):
    v1, e, p, j = cfg.vocab + 1, cfg.predictor_embed, cfg.predictor_units, cfg.joint_dim
    init.normal("pred.embed", (v1, e), fan_in=1)
    init.normal("pred.wx", (e, 4 * p))
    init.normal("pred.wh", (p, 4 * p))
    init.zeros("pred.b", (4 * p,))
    init.normal("joint.enc_w", (cfg.d_model, j))
    init.zeros("joint.enc_b", (j,))
    init.normal("joint.pred_w", (p, j))
    init.normal("joint.out_w", (j, v1))
    init.zeros("joint.out_b", (v1,))


def _check_tokens(tokens, cfg: ModelConfig, allow_blank=False):
    for tok in tokens:
        if not (0 <= tok <= cfg.vocab) or (tok == BLANK and not allow_blank):
            raise VocabError(f"token {tok} outside 1..{cfg.vocab}")


def _lstm_cell(z, c, units):
    i = ops.sigmoid(z[:, :units])
    f = ops.sigmoid(z[:, units:2 * units])
    g = ops.tanh(z[:, 2 * units:3 * units])
    o = ops.sigmoid(z[:, 3 * units:])
    c = ops.add(ops.mul(f, c), ops.mul(i, g))
    return ops.mul(o, ops.tanh(c)), c


def predict(labels: Sequence[int], P: ParamScope, cfg: ModelConfig) -> Tensor:
    """Predictor outputs ``F_1 .. F_{U+1}`` as ``[(U+1) x units]``.

    Row u only sees ``labels[:u]``; row 0 sees the start symbol alone.
    """
    labels = [int(y) for y in labels]
    _check_tokens(labels, cfg)
    units = cfg.predictor_units
    tokens = np.array([BLANK] + labels)
    xs = ops.add(ops.matmul(ops.getitem(P["pred.embed"], tokens), P["pred.wx"]), P["pred.b"])
    h = Tensor(np.zeros((1, units)))
    c = Tensor(np.zeros((1, units)))
    outs = []
    for u in range(len(tokens)):
        z = ops.add(ops.getitem(xs, slice(u, u + 1)), ops.matmul(h, P["pred.wh"]))
        h, c = _lstm_cell(z, c, units)
        outs.append(h)
    return ops.concat(outs, axis=0)


def predictor_start(P: ParamScope, cfg: ModelConfig):
    units = cfg.predictor_units
    zero = Tensor(np.zeros((1, units)))
    return predictor_step(BLANK, (zero, zero), P, cfg)


def predictor_step(token: int, state, P: ParamScope, cfg: ModelConfig):
    """Feed one token; returns ``(F [1 x units], new_state)``."""
    _check_tokens([token], cfg, allow_blank=True)
    h, c = state
    x = ops.matmul(ops.getitem(P["pred.embed"], slice(token, token + 1)), P["pred.wx"])
    z = ops.add(ops.add(x, P["pred.b"]), ops.matmul(h, P["pred.wh"]))
    h, c = _lstm_cell(z, c, cfg.predictor_units)
    return h, (h, c)


def joint(enc, pred, P: ParamScope) -> Tensor:
    """Log-probabilities ``[T x U1 x (V+1)]`` for every (frame, label-prefix) pair.

    Encoder and predictor states are projected to the joint width, added,
    passed through tanh and mapped to the output vocabulary.
    """
    enc, pred = ops.as_tensor(enc), ops.as_tensor(pred)
    a = ops.linear(enc, P["joint.enc_w"], P["joint.enc_b"])
    b = ops.matmul(pred, P["joint.pred_w"])
    z = ops.tanh(ops.add(ops.reshape(a, (a.shape[0], 1, a.shape[1])),
                         ops.reshape(b, (1,) + b.shape)))
    return ops.log_softmax(ops.linear(z, P["joint.out_w"], P["joint.out_b"]))


def _lattice(logp: np.ndarray, labels: np.ndarray):
    t_len, u1, _ = logp.shape
    blank = logp[:, :, BLANK]
    emit = np.full((t_len, u1), -np.inf)
    if u1 > 1:
        emit[:, :-1] = logp[:, np.arange(u1 - 1), labels]
    return blank, emit


def transducer_forward_backward(logp: np.ndarray, labels: Sequence[int]):
    """Returns ``(log_likelihood, alpha, beta)`` over the ``T x (U+1)`` lattice."""
    labels = np.asarray(labels, dtype=np.int64)
    t_len, u1, _ = logp.shape
    blank, emit = _lattice(logp, labels)
    alpha = np.full((t_len, u1), -np.inf)
    alpha[0, 0] = 0.0
    for t in range(t_len):
        for u in range(u1):
            if t == 0 and u == 0:
                continue
            from_blank = alpha[t - 1, u] + blank[t - 1, u] if t > 0 else -np.inf
            from_emit = alpha[t, u - 1] + emit[t, u - 1] if u > 0 else -np.inf
            alpha[t, u] = np.logaddexp(from_blank, from_emit)
    beta = np.full((t_len, u1), -np.inf)
    beta[-1, -1] = blank[-1, -1]
    for t in range(t_len - 1, -1, -1):
        for u in range(u1 - 1, -1, -1):
            if t == t_len - 1 and u == u1 - 1:
                continue
            via_blank = beta[t + 1, u] + blank[t, u] if t < t_len - 1 else -np.inf
            via_emit = beta[t, u + 1] + emit[t, u] if u < u1 - 1 else -np.inf
            beta[t, u] = np.logaddexp(via_blank, via_emit)
    return alpha[-1, -1] + blank[-1, -1], alpha, beta


def transducer_loss(logp, labels: Sequence[int]) -> Tensor:
    """Negative log-likelihood summed over all monotonic alignments.

    ``logp`` is ``[T x (U+1) x (V+1)]`` (see :func:`joint`). The gradient
    with respect to ``logp`` is exact, from alpha/beta occupancies.
    """
    logp = ops.as_tensor(logp)
    labels = np.asarray(labels, dtype=np.int64)
    t_len, u1, v1 = logp.shape
    if u1 != len(labels) + 1:
        raise VocabError(f"lattice has {u1} label positions for {len(labels)} labels")
    if labels.size and (labels.min() < 1 or labels.max() >= v1):
        raise VocabError(f"labels must lie in 1..{v1 - 1}")
    ll, alpha, beta = transducer_forward_backward(logp.data, labels)
    if not np.isfinite(ll):
        raise NumericError(f"transducer log-likelihood is {ll}")

    def backward(g):
        blank, emit = _lattice(logp.data, labels)
        grad = np.zeros_like(logp.data)
        nxt = np.full((t_len, u1), -np.inf)
        nxt[:-1] = beta[1:]
        nxt[-1, -1] = 0.0
        grad[:, :, BLANK] = -np.exp(alpha + blank + nxt - ll)
        if u1 > 1:
            occ = -np.exp(alpha[:, :-1] + emit[:, :-1] + beta[:, 1:] - ll)
            grad[:, np.arange(u1 - 1), labels] += occ
        return (g * grad,)

    return ops.op(np.array(-ll), (logp,), backward)


def greedy_decode(enc, P: ParamScope, cfg: ModelConfig,
                  max_symbols: int = MAX_SYMBOLS_PER_FRAME) -> list:
    """Emit argmax tokens per frame until blank (or the per-frame cap), then advance."""
    enc = ops.as_tensor(enc)
    enc_proj = ops.linear(enc, P["joint.enc_w"], P["joint.enc_b"]).data
    out_w, out_b = P["joint.out_w"].data, P["joint.out_b"].data
    pred, state = predictor_start(P, cfg)
    pred_proj = (pred @ P["joint.pred_w"]).data[0]
    hyp = []
    for t in range(enc_proj.shape[0]):
        for _ in range(max_symbols):
            logits = np.tanh(enc_proj[t] + pred_proj) @ out_w + out_b
            tok = int(np.argmax(logits))
            if tok == BLANK:
                break
            hyp.append(tok)
            pred, state = predictor_step(tok, state, P, cfg)
            pred_proj = (pred @ P["joint.pred_w"]).data[0]
    return hyp


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def token_error_rate(hyp: Sequence, ref: Sequence) -> float:
    return edit_distance(hyp, ref) / max(1, len(ref))
