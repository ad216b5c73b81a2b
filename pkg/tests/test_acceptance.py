"""Acceptance criteria, one test each. Each prints a PASS/FAIL line with its runtime;
the lines are repeated in the pytest terminal summary.

Run standalone with ``python3 tests/test_acceptance.py``.
"""

import functools
import os
import sys
import tempfile
import time

import numpy as np

sys.path.insert(0, os.path.dirname(__file__))
from test_transducer import brute_force_nll, random_logp  # noqa: E402

from crossutt import config as config_io  # noqa: E402
from crossutt import tensor_ops as ops  # noqa: E402
from crossutt.attention_masks import STREAMING, build_current_mask, future_horizon  # noqa: E402
from crossutt.config import FusionConfig, MaskConfig, ModelConfig, RunConfig  # noqa: E402
from crossutt.context_fusion import LayerContext, PoolingProjector, pool_project  # noqa: E402
from crossutt.conformer import subsampled_length  # noqa: E402
from crossutt.model import ContextualTransducer  # noqa: E402
from crossutt.scheduler import Manifest, plan, read_manifest, utilization  # noqa: E402
from crossutt.toy import make_corpus  # noqa: E402
from crossutt.training import decode, finite_difference_check, gradcheck_setup, train  # noqa: E402
from crossutt.transducer import transducer_loss  # noqa: E402

HERE = os.path.dirname(__file__)
DEMO = os.path.join(HERE, "data", "splice_demo.tsv")
TOY = os.path.join(HERE, os.pardir, "configs", "toy.ini")

RESULTS = []  # one formatted line per criterion run

SMALL = ModelConfig(blocks=2, d_model=8, heads=2, conv_kernel=3, d_in=8, subsample_channels=2,
                    predictor_embed=4, predictor_units=4, joint_dim=8, vocab=4)


def criterion(number, name, budget=None):
    """Time the check, enforce the runtime budget, and record one result line."""
    def wrap(fn):
        @functools.wraps(fn)
        def run():
            start = time.perf_counter()
            detail, passed = "", False
            try:
                detail = fn() or ""
                elapsed = time.perf_counter() - start
                assert budget is None or elapsed < budget, f"took {elapsed:.1f}s, budget {budget}s"
                passed = True
            except AssertionError as exc:
                detail = str(exc).splitlines()[0] if str(exc) else "assertion failed"
                raise
            finally:
                elapsed = time.perf_counter() - start
                line = (f"[{'PASS' if passed else 'FAIL'}] {number}. {name} "
                        f"({elapsed:.2f}s) {detail}").rstrip()
                RESULTS.append(line)
                print(line)
        return run
    return wrap


@criterion(1, "batch utilization on the three-row manifest", budget=1.0)
def test_1_splice_demo_utilization():
    m = read_manifest(DEMO)
    base, spliced = plan(m, 3, 7, splicing=False), plan(m, 3, 7, splicing=True)
    u0, u1 = utilization(base, window=5), utilization(spliced)
    assert spliced.num_steps == 5
    assert abs(u0 * 100 - 63.8) <= 0.1, u0
    assert abs(u1 * 100 - 90.4) <= 0.1, u1
    return f"no splicing {u0:.2%} ({base.filled_frames(5)}/105), splicing {u1:.2%} " \
           f"({spliced.filled_frames()}/105)"


@criterion(2, "splicing dominance on random manifests", budget=10.0)
def test_2_splicing_dominance():
    rng = np.random.default_rng(2)
    violations = mismatched = 0
    n = 600
    for _ in range(n):
        rows, capacity = int(rng.integers(1, 5)), int(rng.integers(1, 60))
        lengths = {f"c{i}": list(rng.integers(1, capacity + 1, size=int(rng.integers(1, 13))))
                   for i in range(int(rng.integers(0, 9)))}
        m = Manifest.from_lengths(lengths)
        base, spliced = plan(m, rows, capacity, False), plan(m, rows, capacity, True)
        violations += utilization(spliced) < utilization(base)
        mismatched += base.filled_frames() != m.total_frames
        mismatched += spliced.filled_frames() != m.total_frames
    assert violations == 0 and mismatched == 0, (violations, mismatched)
    return f"{n} manifests, 0 violations"


@criterion(3, "transducer loss against path enumeration", budget=10.0)
def test_3_loss_oracle():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        t, u, v = int(rng.integers(1, 5)), int(rng.integers(0, 4)), int(rng.integers(1, 4))
        logp = random_logp(rng, t, u, v)
        labels = list(rng.integers(1, v + 1, size=u))
        worst = max(worst, abs(float(transducer_loss(logp, labels).data) - brute_force_nll(logp, labels)))
    assert worst <= 1e-10, worst
    return f"50 instances, max abs diff {worst:.1e}"


@criterion(4, "finite-difference gradient check", budget=60.0)
def test_4_gradcheck():
    model, loss_fn = gradcheck_setup(0)
    worst = finite_difference_check(model, loss_fn)
    name = max(worst, key=worst.get)
    assert worst[name] < 1e-4, (name, worst[name])
    return f"{len(worst)} tensors, max relative error {worst[name]:.2e}"


def _sg_model(method):
    mask = MaskConfig(mode=STREAMING) if method == "chunked" else MaskConfig()
    return ContextualTransducer(RunConfig(model=SMALL, fusion=FusionConfig(method), mask=mask), seed=5)


@criterion(5, "stop-gradient isolation of cached context")
def test_5_stop_gradient():
    rng = np.random.default_rng(5)
    prev, cur, labels = rng.standard_normal((20, 8)), rng.standard_normal((16, 8)), [2, 1, 3]
    for method in ("embed_concat", "pooling", "chunked"):
        model = _sg_model(method)
        # cache leaves that would record any gradient reaching them
        cache = model.new_cache()
        leaves = [ops.Tensor(rng.standard_normal((5, 8)), requires_grad=True) for _ in range(3)]
        cache.update("prev", leaves, detach=False)
        P = model.scope(requires_grad=True)
        with ops.Tape() as tape:
            loss = model.forward(cur, labels, cache, P, training=True).loss
        tape.backward(loss)
        assert all(t.grad is not None and not t.grad.any() for t in leaves), method

        # the same cache built outside and inside the tape
        outside = model.new_cache()
        _, enc = model.decode(prev, outside)
        model.remember(outside, "prev", enc, prev)
        P_out = model.scope(requires_grad=True)
        with ops.Tape() as tape:
            loss = model.forward(cur, labels, outside, P_out, training=True).loss
        tape.backward(loss)

        inside = model.new_cache()
        P_in = model.scope(requires_grad=True)
        with ops.Tape() as tape:
            enc = model.encode(prev, inside, P_in, training=False)
            model.remember(inside, "prev", enc, prev)
            loss = model.forward(cur, labels, inside, P_in, training=True).loss
        tape.backward(loss)
        g_out, g_in = P_out.grads(), P_in.grads()
        assert set(g_out) == set(g_in)
        for name in g_out:
            assert g_out[name].tobytes() == g_in[name].tobytes(), (method, name)
    return "methods embed_concat, pooling, chunked"


@criterion(6, "baseline reduction with empty context")
def test_6_baseline_reduction():
    rng = np.random.default_rng(6)
    utts = []
    for _ in range(20):
        t = int(rng.integers(8, 41))
        utts.append((rng.standard_normal((t, 8)), list(rng.integers(1, 5, size=int(rng.integers(1, 4))))))
    for method in ("input_concat", "embed_concat", "pooling", "chunked"):
        mask = MaskConfig(mode=STREAMING) if method == "chunked" else MaskConfig()
        model = ContextualTransducer(RunConfig(model=SMALL, fusion=FusionConfig(method), mask=mask),
                                     seed=6)
        base = ContextualTransducer(RunConfig(model=SMALL, fusion=FusionConfig("none"), mask=mask),
                                    seed=6)
        assert all(base.params[k].tobytes() == model.params[k].tobytes() for k in base.params)
        for x, labels in utts:
            for training in (False, True):
                a = model.forward(x, labels, model.new_cache(), model.scope(), training)
                b = base.forward(x, labels, None, base.scope(), training)
                assert a.encoder.output.data.tobytes() == b.encoder.output.data.tobytes(), method
                assert a.loss.data.tobytes() == b.loss.data.tobytes(), method
            assert model.decode(x, model.new_cache())[0] == base.decode(x)[0], method
    return "4 methods x 20 utterances"


@criterion(7, "streaming causality beyond the lookahead horizon")
def test_7_streaming_causality():
    rng = np.random.default_rng(7)
    checked = 0
    for lookahead in (0, 3):
        cfg = RunConfig(mask=MaskConfig(mode=STREAMING, chunk=3, lookahead=lookahead))
        model = ContextualTransducer(cfg, seed=7)
        x = rng.standard_normal((96, cfg.model.d_in))
        t = subsampled_length(96)
        assert t == 24
        base = model.encode(x, None, model.scope()).output.data
        horizon = future_horizon(build_current_mask(cfg.mask_spec(), t).allow, cfg.model.blocks)
        moved_any = False
        for q in range(t):
            first_hidden = 4 * (horizon[q] + 1)  # input frames feeding subsampled frames > horizon
            if first_hidden >= 96:
                continue
            y = x.copy()
            y[first_hidden:] = 10 * rng.standard_normal(y[first_hidden:].shape)
            out = model.encode(y, None, model.scope()).output.data
            assert np.abs(out[q] - base[q]).max() <= 1e-12, (lookahead, q)
            moved_any |= bool(np.abs(out[horizon[q] + 1:] - base[horizon[q] + 1:]).max() > 0)
            checked += 1
        assert moved_any  # the noise does reach frames past the horizon
    return f"{checked} query positions, lookahead 0 and 3"


@criterion(8, "pooling normalisation and shape")
def test_8_pooling():
    rng = np.random.default_rng(8)
    model = ContextualTransducer(RunConfig(model=SMALL, fusion=FusionConfig("pooling")), seed=8)
    P = model.scope()
    worst = 0.0
    for frames in (1, 2, 7, 31, 32, 33, 100):
        for layer in range(SMALL.blocks):
            proj = PoolingProjector.from_scope(P, layer + 1)
            for training in (False, True):
                out, weights, _ = pool_project(rng.standard_normal((frames, 8)), proj, training)
                assert out.shape == (32, 8)
                worst = max(worst, float(np.abs(weights.sum(axis=1) - 1).max()))
        # through the fusion path: one 32-row block per cached utterance
        cache = model.new_cache()
        cache.update("prev", [ops.Tensor(rng.standard_normal((frames, 8)))] * (SMALL.blocks + 1))
        ctx = LayerContext("pooling", cache, P)
        assert ctx.prev_lengths() == [32]
        assert ctx.fuse(1, rng.standard_normal((5, 8))).shape == (32 + 5, 8)
    assert worst <= 1e-9, worst
    return f"L=32 for 1..100 frames, max row-sum error {worst:.1e}"


@criterion(9, "toy overfit round trip", budget=300.0)
def test_9_toy_overfit():
    cfg = config_io.load(TOY)
    with tempfile.TemporaryDirectory() as tmp:
        manifest = make_corpus(tmp, conversations=3, utterances=3, vocab=cfg.model.vocab,
                               d_in=cfg.model.d_in)
        model = ContextualTransducer(cfg)
        losses = train(model, manifest).losses
        report = decode(model, manifest)
    ratio = losses[-1] / losses[0]
    assert len(losses) == 200
    assert ratio < 0.1, ratio
    assert report.token_error_rate == 0, report.hypotheses
    return f"loss ratio {ratio:.4f}, TER {report.token_error_rate:.3f}"


if __name__ == "__main__":
    failed = 0
    for fn in [v for k, v in sorted(globals().items()) if k.startswith("test_")]:
        try:
            fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
