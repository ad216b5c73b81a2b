import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossutt.attention_masks import (NON_STREAMING, STREAMING, AttentionMask, MaskSpec,
                                      build_current_mask, build_mask, build_prev_mask, compose,
                                      future_horizon, prev_visible, render)
from crossutt.errors import DimensionError, SpecError


def rule_current(spec, q, k):
    """Brute-force per-pair rule for the current utterance."""
    if spec.mode == NON_STREAMING:
        return True
    cq, ck = q // spec.chunk_size, k // spec.chunk_size
    if cq == ck:
        return True
    if spec.lookahead is not None and ck > cq + math.ceil(spec.lookahead / spec.chunk_size):
        return False
    if spec.left_cap is not None and k < q - spec.left_cap:
        return False
    return True


def rule_prev(spec):
    """Visible flags for cached frames, oldest first, by walking back from the present."""
    lengths = list(spec.prev_utterance_lengths)  # most recent first
    flags_recent_first = []
    dist = 0
    for i, n in enumerate(lengths):
        for _ in range(n):
            ok = True
            if spec.prev_utt_cap is not None and i >= spec.prev_utt_cap:
                ok = False
            if spec.prev_frame_cap is not None and dist >= spec.prev_frame_cap:
                ok = False
            flags_recent_first.append(ok)
            dist += 1
    # within an utterance frames run oldest->newest, so reverse per utterance then overall
    out, pos = [], 0
    per_utt = []
    for n in lengths:
        per_utt.append(flags_recent_first[pos:pos + n][::-1])
        pos += n
    for seg in reversed(per_utt):
        out.extend(seg)
    return np.array(out, dtype=bool)


specs = st.builds(
    MaskSpec,
    mode=st.sampled_from([NON_STREAMING, STREAMING]),
    chunk_size=st.integers(1, 5),
    lookahead=st.one_of(st.none(), st.integers(0, 12)),
    left_cap=st.one_of(st.none(), st.integers(0, 10)),
    prev_frame_cap=st.one_of(st.none(), st.integers(0, 30)),
    prev_utt_cap=st.one_of(st.none(), st.integers(0, 3)),
    prev_utterance_lengths=st.lists(st.integers(0, 12), max_size=3).map(tuple),
)


def test_non_streaming_is_full():
    assert build_current_mask(MaskSpec(), 3).allow.all()
    spec = MaskSpec(NON_STREAMING, lookahead=None, left_cap=None)
    assert build_mask(spec.with_prev([4, 2]), 5).allow.all()


def test_chunk_three_no_lookahead():
    m = build_current_mask(MaskSpec(STREAMING, 3, lookahead=0), 6).allow
    assert set(np.flatnonzero(m[0])) == {0, 1, 2}
    assert set(np.flatnonzero(m[3])) == set(range(6))
    assert not m[:3, 3:].any()  # the forbidden 3x3 block


def test_chunk_three_lookahead_one_chunk():
    m = build_current_mask(MaskSpec(STREAMING, 3, lookahead=3), 6).allow
    assert m[0].all()


def test_lookahead_rounds_up_to_chunks():
    assert MaskSpec(STREAMING, 3, lookahead=1).lookahead_chunks == 1
    assert MaskSpec(STREAMING, 3, lookahead=20).lookahead_chunks == 7


def test_prev_spans_nine_and_six():
    spec = MaskSpec(STREAMING, 3, lookahead=0).with_prev([9, 6])
    prev = build_prev_mask(spec, 9)
    assert prev.row_counts()[0] == 15
    full = build_mask(spec, 9)
    assert full.allow.shape == (9, 24)
    assert full.row_counts()[0] == 15 + 3


def test_prev_cap_zero_is_baseline():
    spec = MaskSpec(STREAMING, 3, lookahead=0, prev_frame_cap=0).with_prev([9, 6])
    assert not build_prev_mask(spec, 4).allow.any()


def test_prev_frame_cap_takes_most_recent():
    spec = MaskSpec(prev_frame_cap=100).with_prev([80, 50])
    vis = prev_visible(spec)
    # oldest first: 50 frames of utt i-2 then 80 of utt i-1
    assert vis.size == 130
    assert not vis[:30].any() and vis[30:].all()


def test_prev_utt_cap():
    vis = prev_visible(MaskSpec(prev_utt_cap=1).with_prev([4, 5]))
    assert vis.tolist() == [False] * 5 + [True] * 4


def test_invalid_specs():
    with pytest.raises(SpecError):
        MaskSpec(STREAMING, chunk_size=0)
    with pytest.raises(SpecError):
        MaskSpec(lookahead=-1)
    with pytest.raises(SpecError):
        MaskSpec(mode="sideways")
    with pytest.raises(SpecError):
        build_current_mask(MaskSpec(), 0)


def test_compose_examples():
    cur = build_current_mask(MaskSpec(STREAMING, 2, lookahead=0), 4)
    empty = build_prev_mask(MaskSpec(), 4)
    assert compose(empty, cur) == cur
    with pytest.raises(DimensionError):
        compose(build_prev_mask(MaskSpec().with_prev([3]), 3), cur)


@given(specs, st.integers(1, 14))
def test_masks_match_brute_force(spec, t):
    cur = build_current_mask(spec, t).allow
    oracle = np.array([[rule_current(spec, q, k) for k in range(t)] for q in range(t)])
    np.testing.assert_array_equal(cur, oracle)
    prev = build_prev_mask(spec, t)
    np.testing.assert_array_equal(prev.allow, np.broadcast_to(rule_prev(spec), prev.allow.shape))
    full = build_mask(spec, t)
    np.testing.assert_array_equal(full.row_counts(), prev.row_counts() + cur.sum(axis=1))
    assert sum(n for _, n in full.key_layout) == full.num_keys
    assert full.row_counts().min() >= 1


@given(specs, st.integers(1, 14))
def test_streaming_causality_scan(spec, t):
    if spec.mode != STREAMING or spec.lookahead is None:
        return
    cur = build_current_mask(spec, t).allow
    horizon_chunk = np.arange(t) // spec.chunk_size + spec.lookahead_chunks
    for q in range(t):
        allowed = np.flatnonzero(cur[q])
        assert (allowed // spec.chunk_size <= horizon_chunk[q]).all()


@settings(max_examples=50)
@given(st.lists(st.integers(0, 5), min_size=3, max_size=3), st.integers(1, 4), st.integers(0, 10**6))
def test_compose_associative(lengths, q, seed):
    rng = np.random.default_rng(seed)
    parts = [AttentionMask(rng.random((q, n)) < 0.5, ((f"s{i}", n),)) for i, n in enumerate(lengths)]
    a, b, c = parts
    assert compose(compose(a, b), c) == compose(a, compose(b, c))


def test_future_horizon_stacks_lookahead():
    allow = build_current_mask(MaskSpec(STREAMING, 3, lookahead=3), 24).allow
    h1 = future_horizon(allow, 1)
    assert h1[0] == 5 and h1[3] == 8
    h2 = future_horizon(allow, 2)
    assert h2[0] == 8
    causal = build_current_mask(MaskSpec(STREAMING, 3, lookahead=0), 24).allow
    np.testing.assert_array_equal(future_horizon(causal, 4), np.arange(24) // 3 * 3 + 2)


def test_render_layout():
    spec = MaskSpec(STREAMING, 3, lookahead=0).with_prev([2, 1])
    text = render(build_mask(spec, 3))
    lines = text.splitlines()
    assert lines[0] == "# 3x6 keys prev-2:1 prev-1:2 cur:3"
    assert lines[1] == "    0|12|345"
    assert lines[2] == "  0 1|11|111"
