import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import grad_errors, numeric_grad
from crossutt import tensor_ops as ops
from crossutt.config import ModelConfig
from crossutt.errors import NumericError, VocabError
from crossutt.params import Initializer, ParamScope
from crossutt.training import relative_error
from crossutt.transducer import (BLANK, edit_distance, greedy_decode, init_transducer, joint,
                                 predict, predictor_start, predictor_step, token_error_rate,
                                 transducer_loss)

CFG = ModelConfig(d_model=6, predictor_embed=4, predictor_units=5, joint_dim=7, vocab=3)


def make_params(cfg=CFG, seed=0):
    init = Initializer(np.random.default_rng(seed))
    init_transducer(cfg, init)
    return init.arrays


def random_logp(rng, t, u, v):
    x = rng.standard_normal((t, u + 1, v + 1)) * 2
    return x - np.logaddexp.reduce(x, axis=-1, keepdims=True)


def brute_force_nll(logp, labels):
    """-log of the summed probability of every blank/label interleaving."""
    t_len = logp.shape[0]
    n = len(labels)
    total = -np.inf
    for emit_pos in itertools.combinations(range(t_len + n), n):
        emit_pos = set(emit_pos)
        if t_len + n - 1 in emit_pos:
            continue  # the final symbol must be the closing blank
        t = u = 0
        score = 0.0
        for k in range(t_len + n):
            if k in emit_pos:
                score += logp[t, u, labels[u]]
                u += 1
            else:
                score += logp[t, u, BLANK]
                t += 1
        total = np.logaddexp(total, score)
    return -total


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(0, 3), st.integers(1, 3), st.integers(0, 2 ** 32 - 1))
def test_loss_matches_path_enumeration(t, u, v, seed):
    rng = np.random.default_rng(seed)
    logp = random_logp(rng, t, u, v)
    labels = list(rng.integers(1, v + 1, size=u))
    loss = float(transducer_loss(logp, labels).data)
    assert abs(loss - brute_force_nll(logp, labels)) < 1e-10


def test_no_labels_is_all_blank(rng):
    logp = random_logp(rng, 4, 0, 3)
    assert np.isclose(float(transducer_loss(logp, []).data), -logp[:, 0, BLANK].sum(), atol=1e-12)


def test_single_frame_single_label(rng):
    logp = random_logp(rng, 1, 1, 2)
    expected = -(logp[0, 0, 2] + logp[0, 1, BLANK])
    assert np.isclose(float(transducer_loss(logp, [2]).data), expected, atol=1e-12)


def test_loss_gradient_wrt_logp(rng):
    logp = random_logp(rng, 4, 3, 3)
    assert max(grad_errors(lambda x: transducer_loss(x, [1, 3, 2]), logp)) < 1e-6


def test_loss_gradients_through_joint_and_predictor(rng):
    A = make_params()
    enc = rng.standard_normal((3, CFG.d_model))
    labels = [2, 1]

    def loss_of(P, e):
        return transducer_loss(joint(e, predict(labels, P, CFG), P), labels)

    P = ParamScope(A, requires_grad=True)
    e = ops.Tensor(enc.copy(), requires_grad=True)
    with ops.Tape() as tape:
        loss = loss_of(P, e)
    tape.backward(loss)
    worst = float(relative_error(e.grad, numeric_grad(lambda: float(loss_of(ParamScope(A), enc).data), enc)).max())
    for name, t in P.tensors.items():
        num = numeric_grad(lambda: float(loss_of(ParamScope(A), enc).data), A[name])
        worst = max(worst, float(relative_error(t.grad, num).max()))
    assert worst < 1e-4


def test_loss_errors(rng):
    with pytest.raises(VocabError):
        transducer_loss(random_logp(rng, 2, 2, 3), [1])
    with pytest.raises(VocabError):
        transducer_loss(random_logp(rng, 2, 1, 3), [4])
    logp = random_logp(rng, 2, 1, 3)
    logp[..., BLANK] = -np.inf
    with pytest.raises(NumericError):
        transducer_loss(logp, [1])


def test_predictor_first_row_ignores_labels():
    P = ParamScope(make_params())
    a = predict([1, 2], P, CFG).data
    b = predict([3], P, CFG).data
    np.testing.assert_array_equal(a[0], b[0])


def test_predictor_incremental_equals_batch():
    P = ParamScope(make_params())
    batch = predict([2, 3, 1], P, CFG).data
    out, state = predictor_start(P, CFG)
    rows = [out.data[0]]
    for y in [2, 3, 1]:
        out, state = predictor_step(y, state, P, CFG)
        rows.append(out.data[0])
    np.testing.assert_allclose(np.array(rows), batch, atol=1e-12)


@given(st.lists(st.integers(1, 3), min_size=1, max_size=5), st.data())
def test_predictor_causality(labels, data):
    P = ParamScope(make_params())
    u = data.draw(st.integers(0, len(labels) - 1))
    changed = list(labels)
    changed[u] = data.draw(st.integers(1, 3))
    a, b = predict(labels, P, CFG).data, predict(changed, P, CFG).data
    np.testing.assert_array_equal(a[:u + 1], b[:u + 1])


def test_predictor_zero_weights():
    A = {k: np.zeros_like(v) for k, v in make_params().items()}
    assert not predict([1, 2], ParamScope(A), CFG).data.any()


def test_predictor_vocab_errors():
    P = ParamScope(make_params())
    with pytest.raises(VocabError):
        predict([4], P, CFG)
    with pytest.raises(VocabError):
        predict([0], P, CFG)


def test_joint_normalised_and_hand_composed(rng):
    A = make_params()
    enc, pred = rng.standard_normal((3, 6)), rng.standard_normal((2, 5))
    out = joint(enc, pred, ParamScope(A)).data
    np.testing.assert_allclose(np.logaddexp.reduce(out, axis=-1), 0.0, atol=1e-9)
    for t in range(3):
        for u in range(2):
            z = np.tanh(enc[t] @ A["joint.enc_w"] + A["joint.enc_b"] + pred[u] @ A["joint.pred_w"])
            logits = z @ A["joint.out_w"] + A["joint.out_b"]
            np.testing.assert_allclose(out[t, u], logits - np.logaddexp.reduce(logits), atol=1e-12)


def test_joint_zero_is_uniform():
    A = {k: np.zeros_like(v) for k, v in make_params().items()}
    out = joint(np.zeros((2, 6)), np.zeros((1, 5)), ParamScope(A)).data
    np.testing.assert_allclose(out, np.log(1 / 4), atol=1e-15)


def test_greedy_all_blank():
    A = make_params()
    A["joint.out_b"] = np.array([100.0, 0.0, 0.0, 0.0])
    assert greedy_decode(np.ones((4, 6)), ParamScope(A), CFG) == []


def test_greedy_constructed_single_label():
    cfg = ModelConfig(d_model=2, predictor_embed=4, predictor_units=1, joint_dim=1, vocab=2)
    A = {
        # gates [i, f, g, o]: the start symbol drives h positive, label 2 drives it negative
        "pred.embed": np.array([[10.0, -10, 10, 10], [0, 0, 0, 0], [10, -10, -10, 10]]),
        "pred.wx": np.eye(4), "pred.wh": np.zeros((1, 4)), "pred.b": np.zeros(4),
        "joint.enc_w": np.zeros((2, 1)), "joint.enc_b": np.zeros(1),
        "joint.pred_w": np.ones((1, 1)),
        "joint.out_w": np.array([[-5.0, 0.0, 5.0]]), "joint.out_b": np.zeros(3),
    }
    assert greedy_decode(np.zeros((1, 2)), ParamScope(A), cfg) == [2]


def test_greedy_symbol_cap():
    A = make_params()
    A["joint.out_b"] = np.array([-100.0, 100.0, 0.0, 0.0])
    assert greedy_decode(np.ones((2, 6)), ParamScope(A), CFG) == [1] * 20


def test_token_error_rate():
    assert token_error_rate([1, 2], [1, 2]) == 0
    assert token_error_rate([], [1]) == 1.0
    assert token_error_rate([1, 3], [1, 2, 3]) == pytest.approx(1 / 3)
    assert token_error_rate([1], []) == 1.0
    assert edit_distance("kitten", "sitting") == 3
