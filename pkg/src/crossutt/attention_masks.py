"""Boolean attention masks for the current utterance and its cached context.

All frame counts are at the encoder's subsampled resolution (after the two
stride-2 stages). ``allow[q, k]`` is True when query q may attend key k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .errors import DimensionError, SpecError

NON_STREAMING = "non_streaming"
STREAMING = "streaming"


@dataclass(frozen=True)
class AttentionMask:
    allow: np.ndarray
    key_layout: tuple = ()  # ((segment_id, length), ...) tiling the key axis

    def __post_init__(self):
        allow = np.asarray(self.allow, dtype=bool)
        if allow.ndim != 2:
            raise DimensionError(f"mask must be 2-D, got shape {allow.shape}")
        object.__setattr__(self, "allow", allow)
        layout = tuple((str(s), int(n)) for s, n in self.key_layout) or (("cur", allow.shape[1]),)
        if sum(n for _, n in layout) != allow.shape[1]:
            raise DimensionError(f"key layout {layout} does not tile {allow.shape[1]} keys")
        object.__setattr__(self, "key_layout", layout)

    @property
    def num_queries(self) -> int:
        return self.allow.shape[0]

    @property
    def num_keys(self) -> int:
        return self.allow.shape[1]

    def row_counts(self) -> np.ndarray:
        return self.allow.sum(axis=1)

    def __eq__(self, other):
        if not isinstance(other, AttentionMask):
            return NotImplemented
        return self.key_layout == other.key_layout and np.array_equal(self.allow, other.allow)

    __hash__ = None


@dataclass(frozen=True)
class MaskSpec:
    """Mask geometry.

    ``lookahead`` is in frames and is rounded up to whole chunks; ``None``
    means unlimited. ``left_cap`` bounds how far back (in frames) a query may
    look inside the current utterance; its own chunk is always visible.
    ``prev_utterance_lengths`` lists cached context lengths most recent first.
    ``prev_frame_cap`` keeps only the most recent frames of that context and
    ``prev_utt_cap`` only the most recent utterances; both may be combined.
    """

    mode: str = NON_STREAMING
    chunk_size: int = 3
    lookahead: Optional[int] = 20
    left_cap: Optional[int] = None
    prev_frame_cap: Optional[int] = None
    prev_utt_cap: Optional[int] = None
    prev_utterance_lengths: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.mode not in (NON_STREAMING, STREAMING):
            raise SpecError(f"unknown mask mode {self.mode!r}")
        if self.mode == STREAMING and self.chunk_size < 1:
            raise SpecError("streaming masks need chunk_size >= 1")
        for name in ("lookahead", "left_cap", "prev_frame_cap", "prev_utt_cap"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise SpecError(f"{name} must be >= 0, got {v}")
        lengths = tuple(int(n) for n in self.prev_utterance_lengths)
        if any(n < 0 for n in lengths):
            raise SpecError("previous utterance lengths must be >= 0")
        object.__setattr__(self, "prev_utterance_lengths", lengths)

    @property
    def streaming(self) -> bool:
        return self.mode == STREAMING

    @property
    def lookahead_chunks(self) -> Optional[int]:
        if self.lookahead is None:
            return None
        return math.ceil(self.lookahead / self.chunk_size)

    def with_prev(self, lengths) -> "MaskSpec":
        return replace(self, prev_utterance_lengths=tuple(lengths))


def build_current_mask(spec: MaskSpec, num_frames: int) -> AttentionMask:
    if num_frames < 1:
        raise SpecError("current utterance needs at least one frame")
    if not spec.streaming:
        return AttentionMask(np.ones((num_frames, num_frames), dtype=bool), (("cur", num_frames),))
    t = np.arange(num_frames)
    chunk = t // spec.chunk_size
    q_chunk, k_chunk = chunk[:, None], chunk[None, :]
    allow = np.ones((num_frames, num_frames), dtype=bool)
    if spec.lookahead_chunks is not None:
        allow &= k_chunk <= q_chunk + spec.lookahead_chunks
    if spec.left_cap is not None:
        allow &= (t[None, :] >= t[:, None] - spec.left_cap) | (k_chunk == q_chunk)
    return AttentionMask(allow, (("cur", num_frames),))


def prev_visible(spec: MaskSpec) -> np.ndarray:
    """Visibility of each cached context frame, laid out oldest to newest."""
    recent_first = spec.prev_utterance_lengths
    if spec.prev_utt_cap is not None:
        keep = [n if i < spec.prev_utt_cap else 0 for i, n in enumerate(recent_first)]
    else:
        keep = list(recent_first)
    visible = [np.arange(n) >= n - k for n, k in zip(recent_first, keep)]
    # distance of each frame from the current utterance start, most recent first
    flat = np.concatenate(visible[::-1]) if visible else np.zeros(0, dtype=bool)
    if spec.prev_frame_cap is not None:
        dist = np.arange(flat.size)[::-1]
        flat &= dist < spec.prev_frame_cap
    return flat


def build_prev_mask(spec: MaskSpec, num_frames: int) -> AttentionMask:
    """M_prev: every current query shares the same window onto cached context."""
    if num_frames < 1:
        raise SpecError("current utterance needs at least one frame")
    visible = prev_visible(spec)
    allow = np.broadcast_to(visible, (num_frames, visible.size)).copy()
    n = len(spec.prev_utterance_lengths)
    layout = tuple((f"prev-{n - i}", length)
                   for i, length in enumerate(reversed(spec.prev_utterance_lengths)))
    return AttentionMask(allow, layout or (("prev", 0),))


def compose(prev: AttentionMask, cur: AttentionMask) -> AttentionMask:
    """Concatenate key axes: previous context first, then current frames."""
    if prev.num_queries != cur.num_queries:
        raise DimensionError(f"query count mismatch: {prev.num_queries} vs {cur.num_queries}")
    if prev.num_keys == 0:
        return cur
    if cur.num_keys == 0:
        return prev
    layout = tuple(s for s in prev.key_layout + cur.key_layout if s[1] > 0)
    return AttentionMask(np.concatenate([prev.allow, cur.allow], axis=1), layout)


def build_mask(spec: MaskSpec, num_frames: int) -> AttentionMask:
    return compose(build_prev_mask(spec, num_frames), build_current_mask(spec, num_frames))


def future_horizon(allow: np.ndarray, layers: int) -> np.ndarray:
    """Furthest current-utterance frame each query can depend on through ``layers`` blocks.

    ``allow`` is a square current-utterance mask; other per-frame operations
    are assumed causal, so only attention extends the horizon.
    """
    allow = np.asarray(allow, dtype=bool)
    reach = np.eye(allow.shape[0], dtype=bool)
    step = allow | np.eye(allow.shape[0], dtype=bool)
    for _ in range(layers):
        reach = (reach.astype(np.int64) @ step.astype(np.int64)) > 0
    idx = np.arange(allow.shape[0])
    return np.where(reach, idx[None, :], -1).max(axis=1)


def render(mask: AttentionMask) -> str:
    """0/1 grid with a ``|`` between key segments and a ruler line on top."""
    bounds = np.cumsum([n for _, n in mask.key_layout])[:-1].tolist()

    def split(chars):
        parts, start = [], 0
        for b in bounds + [len(chars)]:
            parts.append("".join(chars[start:b]))
            start = b
        return "|".join(parts)

    ruler = split([str(k % 10) for k in range(mask.num_keys)])
    names = " ".join(f"{s}:{n}" for s, n in mask.key_layout)
    lines = [f"# {mask.num_queries}x{mask.num_keys} keys {names}", "    " + ruler]
    for q in range(mask.num_queries):
        row = split(["1" if v else "0" for v in mask.allow[q]])
        lines.append(f"{q:3d} {row}")
    return "\n".join(lines) + "\n"
