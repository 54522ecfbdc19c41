"""
Label topologies, numerator FSTs and time constraints.

A topology transducer maps frame-level output units (input tape) to labels
(output tape). Labels are base unit ids; the output label is emitted on the
arc that enters a label, every other arc outputs epsilon. Numerator graphs
keep that output tape so forced alignment can read label boundaries off the
best path.
"""

from dataclasses import dataclass
from itertools import groupby
from typing import Iterable, Literal, NamedTuple, Optional, Sequence

from core.errors import HybridAmError
from core.logging import get_logger
from services.units import UnitInventory
from services.wfst import EPSILON, Fst, compose, label_unit, trim, unit_label

logger = get_logger(__name__)

TopologyKind = Literal["ctc", "hmm1", "chain"]


class TopologyError(HybridAmError):
    """Raised when a topology does not fit the inventory or labels."""

    pass


class ConstraintError(TopologyError):
    """Raised when time constraints leave no numerator path."""

    pass


@dataclass(frozen=True)
class TopologySpec:
    kind: TopologyKind

    def __post_init__(self) -> None:
        if self.kind not in ("ctc", "hmm1", "chain"):
            raise TopologyError(f"unknown topology '{self.kind}'")

    @property
    def is_ctc(self) -> bool:
        return self.kind == "ctc"

    def check(self, inv: UnitInventory) -> None:
        """Raise if ``inv`` lacks the units this topology consumes."""
        if self.kind == "ctc" and inv.blank_id is None:
            raise TopologyError("CTC topology needs a Blank unit in the inventory")
        if self.kind == "chain":
            missing = [i for i in inv.base_ids if inv.second_of(i) is None]
            if missing:
                raise TopologyError(
                    f"chain topology needs second versions; unit {missing[0]} has none"
                )
        if self.kind != "ctc" and inv.blank_id is not None:
            raise TopologyError(f"{self.kind} topology does not use a Blank unit")


class Segment(NamedTuple):
    unit: int
    start: int
    end: int


@dataclass(frozen=True)
class TimeConstraint:
    """Reference segments at output frame rate plus a tolerance in frames."""

    segments: tuple[Segment, ...]
    tolerance: float = 5.0

    def __post_init__(self) -> None:
        if not self.segments:
            raise TopologyError("time constraint without segments")
        previous_end: Optional[int] = None
        for segment in self.segments:
            if segment.end <= segment.start or segment.start < 0:
                raise TopologyError(f"segment {tuple(segment)} is empty or negative")
            if previous_end is not None and segment.start != previous_end:
                raise TopologyError(
                    f"segments must be contiguous: {previous_end} then {segment.start}"
                )
            previous_end = segment.end
        if self.tolerance < 0:
            raise TopologyError("tolerance must be non-negative")

    @property
    def num_frames(self) -> int:
        return self.segments[-1].end

    def allows(self, unit: int, frame: int) -> bool:
        return any(
            s.unit == unit
            and s.start - self.tolerance <= frame < s.end + self.tolerance
            for s in self.segments
        )


# ----------------------------------------------------------------------
# Topology transducers
# ----------------------------------------------------------------------


def topology_fst(spec: TopologySpec, inv: UnitInventory) -> Fst:
    """
    Units-to-labels transducer.

    State 0 is the start; state ``1 + k`` sits inside the k-th label.
    CTC: blank loops on state 0, label self-loops, blank back to 0 and direct
    moves only between different labels. HMM1: self-loops and moves to any
    label, including the same one. Chain: like HMM1, but the self-loop
    consumes the label's second version. Every state is final.
    """
    spec.check(inv)
    labels = inv.base_ids
    fst = Fst(input_alphabet="units", output_alphabet="labels")
    start = fst.add_state()
    fst.set_start(start)
    fst.set_final(start, 0.0)
    state_of = {}
    for label in labels:
        state_of[label] = fst.add_state()
        fst.set_final(state_of[label], 0.0)

    blank = unit_label(inv.blank_id) if inv.blank_id is not None else None
    if blank is not None:
        fst.add_arc(start, start, blank, EPSILON, 0.0)
    for label in labels:
        fst.add_arc(start, state_of[label], unit_label(label), unit_label(label), 0.0)

    for label in labels:
        src = state_of[label]
        if spec.kind == "chain":
            second = inv.second_of(label)
            assert second is not None
            fst.add_arc(src, src, unit_label(second), EPSILON, 0.0)
        else:
            fst.add_arc(src, src, unit_label(label), EPSILON, 0.0)
        if blank is not None:
            fst.add_arc(src, start, blank, EPSILON, 0.0)
        for other in labels:
            if spec.kind == "ctc" and other == label:
                continue
            fst.add_arc(src, state_of[other], unit_label(other), unit_label(other), 0.0)
    return fst


def label_graph(
    labels: Sequence[int],
    silence_id: Optional[int] = None,
    boundaries: Iterable[int] = (),
) -> Fst:
    """
    Linear acceptor over labels with an optional single silence.

    A silence may be inserted at each position in ``boundaries`` (0 is
    before the first label, ``len(labels)`` after the last).
    """
    fst = Fst(input_alphabet="labels", output_alphabet="labels")
    n = len(labels)
    fst.add_states(n + 1)
    fst.set_start(0)
    fst.set_final(n, 0.0)
    allowed = sorted(set(boundaries)) if silence_id is not None else []
    for position in allowed:
        if not 0 <= position <= n:
            raise TopologyError(f"silence boundary {position} outside 0..{n}")
    silence_after = {}
    for position in allowed:
        assert silence_id is not None
        pause = fst.add_state()
        silence_after[position] = pause
        fst.add_arc(
            position, pause, unit_label(silence_id), unit_label(silence_id), 0.0
        )
        if position == n:
            fst.set_final(pause, 0.0)
    for k, label in enumerate(labels):
        fst.add_arc(k, k + 1, unit_label(label), unit_label(label), 0.0)
        if k in silence_after:
            fst.add_arc(
                silence_after[k], k + 1, unit_label(label), unit_label(label), 0.0
            )
    return fst


def numerator_fst(
    labels: Sequence[int],
    spec: TopologySpec,
    inv: UnitInventory,
    allow_silence: bool = False,
    boundaries: Optional[Iterable[int]] = None,
) -> Fst:
    """
    Per-utterance numerator: frames accepted are those that map to ``labels``.

    With ``allow_silence`` a single optional Silence may appear at each word
    boundary (``boundaries``, label positions; utterance edges by default).
    The result is a units-to-labels transducer, trimmed.

    Raises:
        TopologyError: On empty labels, unknown label ids or silence without
            a Silence unit.
    """
    if not labels:
        raise TopologyError("numerator needs at least one label")
    known = set(inv.base_ids)
    unknown = [label for label in labels if label not in known]
    if unknown:
        raise TopologyError(f"label {unknown[0]} is not a base unit of the inventory")
    silence_id = None
    if allow_silence:
        silence_id = inv.silence_id
        if silence_id is None:
            raise TopologyError(
                "silence requested but the inventory has no Silence unit"
            )
        if boundaries is None:
            boundaries = (0, len(labels))
    graph = label_graph(labels, silence_id, boundaries or ())
    return compose(topology_fst(spec, inv), graph)


def apply_time_constraints(num: Fst, tc: TimeConstraint, inv: UnitInventory) -> Fst:
    """
    Unroll ``num`` over the constraint's frames, keeping allowed emissions.

    A frame-t arc emitting unit u survives only if some segment of u (second
    versions count as their base unit) covers t within the tolerance.

    Raises:
        ConstraintError: If no path survives; names the first frame at which
            every path is blocked.
    """
    if num.is_empty():
        raise ConstraintError("numerator is empty before applying constraints")
    assert num.start is not None
    frames = tc.num_frames
    result = Fst(num.input_alphabet, num.output_alphabet)
    ids: dict[tuple[int, int], int] = {}

    def state(t: int, s: int) -> int:
        key = (t, s)
        if key not in ids:
            ids[key] = result.add_state()
        return ids[key]

    result.set_start(state(0, num.start))
    frontier = {num.start}
    for t in range(frames):
        following: set[int] = set()
        for s in sorted(frontier):
            for arc in num.arcs(s):
                unit = inv.base_of(label_unit(arc.ilabel))
                if not tc.allows(unit, t):
                    continue
                result.add_arc(
                    state(t, s),
                    state(t + 1, arc.dst),
                    arc.ilabel,
                    arc.olabel,
                    arc.weight,
                )
                following.add(arc.dst)
        if not following:
            raise ConstraintError(f"time constraints block every path at frame {t}")
        frontier = following
    for s in sorted(frontier):
        if num.is_final(s):
            result.set_final(state(frames, s), num.final_weight(s))
    constrained = trim(result)
    if constrained.is_empty():
        raise ConstraintError(
            f"no constrained path reaches a final state at frame {frames}"
        )
    logger.debug(
        "time constraints applied",
        extra={"extra_fields": {"frames": frames, "states": constrained.num_states}},
    )
    return constrained


# ----------------------------------------------------------------------
# Label <-> frame mappings
# ----------------------------------------------------------------------


def collapse(
    frames: Sequence[int],
    spec: TopologySpec,
    inv: UnitInventory,
    drop_silence: bool = True,
) -> list[int]:
    """
    The topology's frames-to-labels mapping.

    CTC merges repeats then removes blanks; HMM1 merges repeats; chain maps
    second versions onto their base, each base-unit frame starting a label.

    Raises:
        TopologyError: If a chain second version does not continue its own
            label.
    """
    if spec.kind == "chain":
        for t, frame in enumerate(frames):
            base = inv.base_of(frame)
            if base != frame and (t == 0 or inv.base_of(frames[t - 1]) != base):
                raise TopologyError(
                    f"second version of unit {base} at frame {t} starts no label"
                )
        labels = [f for f in frames if inv.base_of(f) == f]
    else:
        labels = [unit for unit, _ in groupby(frames)]
        if spec.kind == "ctc":
            labels = [u for u in labels if u != inv.blank_id]
    if drop_silence and inv.silence_id is not None:
        labels = [u for u in labels if u != inv.silence_id]
    return labels


def expand_durations(
    labels: Sequence[int],
    durations: Sequence[int],
    spec: TopologySpec,
    inv: UnitInventory,
    gaps: Optional[Sequence[int]] = None,
) -> list[int]:
    """
    Frame sequence realising ``labels`` with the given per-label durations.

    For CTC, ``gaps`` holds the blank frames before each label and after
    the last one (``len(labels) + 1`` entries); identical neighbours need at
    least one blank between them.
    """
    if len(durations) != len(labels) or any(d < 1 for d in durations):
        raise TopologyError("need one positive duration per label")
    frames: list[int] = []
    if spec.kind == "ctc":
        blank = inv.blank_id
        if blank is None:
            raise TopologyError("CTC expansion needs a Blank unit")
        gaps = list(gaps) if gaps is not None else [0] * (len(labels) + 1)
        if len(gaps) != len(labels) + 1:
            raise TopologyError("need len(labels) + 1 blank gaps")
        for k, (label, duration) in enumerate(zip(labels, durations)):
            if k and labels[k - 1] == label and gaps[k] < 1:
                raise TopologyError(
                    f"repeated label {label} needs a blank before position {k}"
                )
            frames.extend([blank] * gaps[k])
            frames.extend([label] * duration)
        frames.extend([blank] * gaps[-1])
        return frames
    for label, duration in zip(labels, durations):
        if spec.kind == "chain":
            second = inv.second_of(label)
            if second is None:
                raise TopologyError(f"unit {label} has no second version")
            frames.append(label)
            frames.extend([second] * (duration - 1))
        else:
            frames.extend([label] * duration)
    return frames


# ----------------------------------------------------------------------
# Time-constraint text format
# ----------------------------------------------------------------------


def write_time_constraints(constraints: dict[str, Sequence[Segment]]) -> str:
    """``utt_id unit start end`` lines, utterances in id order."""
    lines = [
        f"{utt_id} {s.unit} {s.start} {s.end}"
        for utt_id in sorted(constraints)
        for s in constraints[utt_id]
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def read_time_constraints(text: str) -> dict[str, list[Segment]]:
    segments: dict[str, list[Segment]] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 4:
            raise TopologyError(f"line {number}: expected 'utt_id unit start end'")
        try:
            unit, start, end = (int(f) for f in fields[1:])
        except ValueError as e:
            raise TopologyError(f"line {number}: {e}") from e
        segments.setdefault(fields[0], []).append(Segment(unit, start, end))
    return segments
