"""Conversation-preserving minibatch planning with optional utterance splicing.

A plan has ``rows`` minibatch rows, each holding at most ``capacity`` frames
per step. Every conversation is pinned to one row for its whole lifetime,
so a row's stream is a sequence of whole conversations and the context cache
for that row always holds the right predecessors. Without splicing each
row-step holds a single utterance; with splicing consecutive utterances are
packed until the next one would overflow, and a new conversation may start
mid-step (with a context reset).
"""

from __future__ import annotations

import os
import string
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

from .errors import CapacityError, ManifestError


@dataclass(frozen=True)
class Utterance:
    utterance_id: str
    frame_count: int
    label_ids: tuple = ()
    feature_ref: str = ""
    start_time: Optional[float] = None


@dataclass
class Conversation:
    conversation_id: str
    utterances: list = field(default_factory=list)

    @property
    def total_frames(self) -> int:
        return sum(u.frame_count for u in self.utterances)


@dataclass
class Manifest:
    conversations: list = field(default_factory=list)

    @classmethod
    def from_lengths(cls, lengths: dict) -> "Manifest":
        """Synthetic manifest: ``{conversation_id: [frame_count, ...]}``."""
        convs = []
        for cid, frames in lengths.items():
            utts = [Utterance(f"{cid}-{i}", int(n)) for i, n in enumerate(frames)]
            convs.append(Conversation(str(cid), utts))
        return cls(convs)

    @property
    def total_frames(self) -> int:
        return sum(c.total_frames for c in self.conversations)

    def utterances(self) -> Iterator[tuple[str, Utterance]]:
        for conv in self.conversations:
            for utt in conv.utterances:
                yield conv.conversation_id, utt

    def by_id(self) -> dict:
        return {u.utterance_id: u for _, u in self.utterances()}


@dataclass(frozen=True)
class Segment:
    utterance_id: str
    conversation_id: str
    start: int  # frame offset inside the row-step
    frames: int
    context_reset: bool

    @property
    def end(self) -> int:
        return self.start + self.frames


@dataclass
class RowStep:
    segments: list = field(default_factory=list)
    padding: int = 0

    @property
    def filled(self) -> int:
        return sum(s.frames for s in self.segments)


@dataclass
class BatchPlan:
    rows: int
    capacity: int
    splicing: bool
    steps: list = field(default_factory=list)  # steps[s][r] -> RowStep

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    def filled_frames(self, window: Optional[int] = None) -> int:
        return sum(rs.filled for step in self.steps[:window] for rs in step)

    def row_stream(self, row: int) -> list:
        return [seg for step in self.steps for seg in step[row].segments]


def assign_rows(manifest: Manifest, rows: int) -> list:
    """Longest-total-first greedy: each conversation goes to the least-loaded row."""
    order = sorted(range(len(manifest.conversations)),
                   key=lambda i: (-manifest.conversations[i].total_frames, i))
    loads = [0] * rows
    assigned: list[list[Conversation]] = [[] for _ in range(rows)]
    for i in order:
        conv = manifest.conversations[i]
        r = min(range(rows), key=lambda k: (loads[k], k))
        assigned[r].append(conv)
        loads[r] += conv.total_frames
    return assigned


def pack_row(conversations: list, capacity: int, splicing: bool) -> list:
    """Row-steps for one row's conversation sequence."""
    steps: list[RowStep] = []
    current: Optional[RowStep] = None
    for conv in conversations:
        for k, utt in enumerate(conv.utterances):
            if not splicing or current is None or current.filled + utt.frame_count > capacity:
                current = RowStep()
                steps.append(current)
            current.segments.append(Segment(utt.utterance_id, conv.conversation_id,
                                            current.filled, utt.frame_count, k == 0))
    for rs in steps:
        rs.padding = capacity - rs.filled
    return steps


def plan(manifest: Manifest, rows: int, capacity: int, splicing: bool = True) -> BatchPlan:
    if rows < 1 or capacity < 1:
        raise CapacityError("rows and capacity must be >= 1")
    for cid, utt in manifest.utterances():
        if utt.frame_count < 1:
            raise ManifestError(f"utterance {utt.utterance_id} has {utt.frame_count} frames")
        if utt.frame_count > capacity:
            raise CapacityError(f"utterance {utt.utterance_id} ({utt.frame_count} frames) "
                                f"exceeds row capacity {capacity}")
    per_row = [pack_row(convs, capacity, splicing) for convs in assign_rows(manifest, rows)]
    n_steps = max((len(r) for r in per_row), default=0)
    steps = []
    for s in range(n_steps):
        steps.append([r[s] if s < len(r) else RowStep(padding=capacity) for r in per_row])
    return BatchPlan(rows, capacity, splicing, steps)


def utilization(plan: BatchPlan, window: Optional[int] = None) -> float:
    """Filled frames over ``rows * capacity * steps``; ``window`` limits to the first steps.

    An empty plan counts as fully utilised.
    """
    steps = plan.num_steps if window is None else min(window, plan.num_steps)
    if steps == 0:
        return 1.0
    return plan.filled_frames(steps) / (plan.rows * plan.capacity * steps)


@dataclass
class SegmentData:
    utterance: Utterance
    conversation_id: str
    features: object
    labels: tuple
    directive: str  # "reset" or "carry"


@dataclass
class TrainingItem:
    step: int
    row: int
    segments: list
    padding: int


def iterate(plan: BatchPlan, manifest: Manifest,
            loader: Optional[Callable[[str], object]] = None) -> Iterator[TrainingItem]:
    """Yield row-steps in plan order with loaded features and cache directives.

    ``loader`` maps a feature_ref to a ``[T x D]`` array (default: the binary
    feature reader). A missing file surfaces as the loader's ``OSError``.
    """
    if loader is None:
        from .features import read_features as loader
    lookup = manifest.by_id()
    for s, step in enumerate(plan.steps):
        for r, rs in enumerate(step):
            segs = []
            for seg in rs.segments:
                utt = lookup[seg.utterance_id]
                segs.append(SegmentData(utt, seg.conversation_id, loader(utt.feature_ref),
                                        utt.label_ids, "reset" if seg.context_reset else "carry"))
            yield TrainingItem(s, r, segs, rs.padding)


# manifest files: conversation_id, utterance_id, frame_count, feature_path, labels[, start]

def parse_manifest(lines, base_dir: str = "") -> Manifest:
    convs: dict[str, Conversation] = {}
    closed: set[str] = set()
    seen: set[str] = set()
    last_cid = None
    last_start: dict[str, float] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) not in (5, 6):
            raise ManifestError(f"expected 5 or 6 tab-separated fields, got {len(fields)}", lineno)
        cid, uid, frames, path, labels = fields[:5]
        try:
            frame_count = int(frames)
        except ValueError:
            raise ManifestError(f"frame_count {frames!r} is not an integer", lineno) from None
        if frame_count < 1:
            raise ManifestError(f"utterance {uid} has frame_count {frame_count}", lineno)
        try:
            label_ids = tuple(int(x) for x in labels.split(",") if x.strip())
        except ValueError:
            raise ManifestError(f"bad label list {labels!r}", lineno) from None
        start = None
        if len(fields) == 6:
            try:
                start = float(fields[5])
            except ValueError:
                raise ManifestError(f"bad start time {fields[5]!r}", lineno) from None
        if uid in seen:
            raise ManifestError(f"duplicate utterance id {uid}", lineno)
        seen.add(uid)
        if cid != last_cid:
            if last_cid is not None:
                closed.add(last_cid)
            if cid in closed:
                raise ManifestError(f"conversation {cid} is not contiguous (out of order)", lineno)
            last_cid = cid
        if start is not None:
            if cid in last_start and start < last_start[cid]:
                raise ManifestError(f"utterance {uid} starts before its predecessor "
                                    f"(out of order)", lineno)
            last_start[cid] = start
        if path and base_dir and not os.path.isabs(path):
            path = os.path.join(base_dir, path)
        conv = convs.setdefault(cid, Conversation(cid))
        conv.utterances.append(Utterance(uid, frame_count, label_ids, path, start))
    return Manifest(list(convs.values()))


def read_manifest(path) -> Manifest:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_manifest(fh, base_dir=os.path.dirname(os.path.abspath(path)))
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc.strerror}") from None


def format_manifest(manifest: Manifest) -> str:
    lines = []
    for cid, u in manifest.utterances():
        fields = [cid, u.utterance_id, str(u.frame_count), u.feature_ref,
                  ",".join(str(y) for y in u.label_ids)]
        if u.start_time is not None:
            fields.append(repr(u.start_time))
        lines.append("\t".join(fields))
    return "\n".join(lines) + ("\n" if lines else "")


def export_plan(plan: BatchPlan) -> str:
    """Line-oriented dump for golden comparisons."""
    out = [f"plan rows={plan.rows} capacity={plan.capacity} splicing={str(plan.splicing).lower()} "
           f"steps={plan.num_steps} filled={plan.filled_frames()}"]
    for s, step in enumerate(plan.steps):
        for r, rs in enumerate(step):
            segs = " ".join(f"{g.utterance_id}[{g.start}:{g.end}]{'*' if g.context_reset else ''}"
                            for g in rs.segments)
            out.append(f"step={s} row={r} pad={rs.padding} {segs}".rstrip())
    return "\n".join(out) + "\n"


def render_grid(plan: BatchPlan, window: Optional[int] = None) -> str:
    """Occupancy grid: one line per row, one ``|``-delimited block per step.

    Each conversation gets a letter; its utterances alternate between upper
    and lower case (starting upper) so splice boundaries stay visible. ``.``
    is padding.
    """
    letters = {}
    alphabet = string.ascii_uppercase
    steps = plan.steps[:window]
    for step in steps:
        for rs in step:
            for g in rs.segments:
                letters.setdefault(g.conversation_id, alphabet[len(letters) % len(alphabet)])
    if not steps:
        return "(empty plan)\n"
    lines = []
    seen: dict[str, int] = {}
    for r in range(plan.rows):
        blocks = []
        for step in steps:
            cells = ""
            for g in step[r].segments:
                k = seen[g.conversation_id] = seen.get(g.conversation_id, -1) + 1
                ch = letters[g.conversation_id]
                cells += (ch if k % 2 == 0 else ch.lower()) * g.frames
            blocks.append(cells + "." * step[r].padding)
        lines.append(f"row {r} |" + "|".join(blocks) + "|")
    legend = ", ".join(f"{v}={k}" for k, v in letters.items())
    if legend:
        lines.append(f"conversations: {legend}")
    return "\n".join(lines) + "\n"
