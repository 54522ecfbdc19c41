"""
Weighted finite-state transducers over integer labels.

Weights are natural-log scores (higher is better). Path weight is the sum of
arc weights plus the final weight; alternative paths aggregate with
log-sum-exp (log semiring) or max (tropical). Label 0 is epsilon on both
tapes, so unit id ``u`` travels as label ``u + 1`` everywhere in the toolkit.

Costs (negated scores) appear only in the text serialization.
"""

import math
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterator, Literal, NamedTuple, Optional, Sequence

import numpy as np

from core.errors import HybridAmError
from core.logging import get_logger

logger = get_logger(__name__)

EPSILON = 0
NEG_INF = -math.inf

Semiring = Literal["log", "tropical"]


class WfstError(HybridAmError):
    """Raised when an FST operation receives unusable input."""

    pass


class NoPathError(WfstError):
    """Raised when a search finds no successful path."""

    pass


class Arc(NamedTuple):
    src: int
    dst: int
    ilabel: int
    olabel: int
    weight: float


def unit_label(unit_id: int) -> int:
    """FST label carrying a unit (or token) id."""
    return unit_id + 1


def label_unit(label: int) -> int:
    """Unit (or token) id carried by a non-epsilon label."""
    if label == EPSILON:
        raise WfstError("epsilon carries no unit id")
    return label - 1


def log_add(a: float, b: float) -> float:
    return float(np.logaddexp(a, b))


def _plus(semiring: Semiring) -> Callable[[float, float], float]:
    return log_add if semiring == "log" else max


class Fst:
    """
    Mutable builder for a weighted transducer.

    Operations in this module never modify their inputs; they build and
    return a new ``Fst``. Optional alphabet names ("units", "labels",
    "chars", "words") let ``compose`` reject mismatched tapes.
    """

    def __init__(
        self,
        input_alphabet: Optional[str] = None,
        output_alphabet: Optional[str] = None,
    ) -> None:
        self._arcs: list[list[Arc]] = []
        self.start: Optional[int] = None
        self.finals: dict[int, float] = {}
        self.input_alphabet = input_alphabet
        self.output_alphabet = output_alphabet

    @classmethod
    def from_arcs(
        cls,
        arcs: Sequence[tuple[int, int, int, int, float]],
        start: int,
        finals: dict[int, float],
        num_states: Optional[int] = None,
    ) -> "Fst":
        """Build an FST from plain tuples; handy for small hand-made graphs."""
        fst = cls()
        highest = max(
            [start, *finals.keys(), *(a[0] for a in arcs), *(a[1] for a in arcs)]
        )
        fst.add_states(max(highest + 1, num_states or 0))
        fst.set_start(start)
        for src, dst, ilabel, olabel, weight in arcs:
            fst.add_arc(src, dst, ilabel, olabel, weight)
        for state, weight in finals.items():
            fst.set_final(state, weight)
        return fst

    @property
    def num_states(self) -> int:
        return len(self._arcs)

    @property
    def num_arcs(self) -> int:
        return sum(len(arcs) for arcs in self._arcs)

    def add_state(self) -> int:
        self._arcs.append([])
        return len(self._arcs) - 1

    def add_states(self, count: int) -> None:
        for _ in range(count):
            self.add_state()

    def _check_state(self, state: int) -> None:
        if not 0 <= state < len(self._arcs):
            raise WfstError(f"state {state} does not exist ({len(self._arcs)} states)")

    def set_start(self, state: int) -> None:
        self._check_state(state)
        self.start = state

    def set_final(self, state: int, weight: float = 0.0) -> None:
        self._check_state(state)
        if math.isnan(weight) or weight == math.inf:
            raise WfstError(f"invalid final weight {weight} on state {state}")
        if weight == NEG_INF:
            self.finals.pop(state, None)
            return
        self.finals[state] = float(weight)

    def add_arc(
        self, src: int, dst: int, ilabel: int, olabel: int, weight: float = 0.0
    ) -> None:
        self._check_state(src)
        self._check_state(dst)
        if not math.isfinite(weight):
            raise WfstError(f"arc {src}->{dst} has non-finite weight {weight}")
        if ilabel < 0 or olabel < 0:
            raise WfstError(f"negative label on arc {src}->{dst}")
        self._arcs[src].append(Arc(src, dst, ilabel, olabel, float(weight)))

    def arcs(self, state: int) -> Sequence[Arc]:
        return self._arcs[state]

    def iter_arcs(self) -> Iterator[Arc]:
        for arcs in self._arcs:
            yield from arcs

    def final_weight(self, state: int) -> float:
        return self.finals.get(state, NEG_INF)

    def is_final(self, state: int) -> bool:
        return state in self.finals

    def is_empty(self) -> bool:
        return self.start is None or not self._arcs

    def is_acceptor(self) -> bool:
        return all(arc.ilabel == arc.olabel for arc in self.iter_arcs())

    def has_input_epsilons(self) -> bool:
        return any(arc.ilabel == EPSILON for arc in self.iter_arcs())

    def input_symbols(self) -> set[int]:
        return {arc.ilabel for arc in self.iter_arcs() if arc.ilabel != EPSILON}

    def copy(self) -> "Fst":
        other = Fst(self.input_alphabet, self.output_alphabet)
        other._arcs = [list(arcs) for arcs in self._arcs]
        other.start = self.start
        other.finals = dict(self.finals)
        return other

    def __repr__(self) -> str:
        return (
            f"Fst(states={self.num_states}, arcs={self.num_arcs}, "
            f"start={self.start}, finals={len(self.finals)})"
        )

    # ------------------------------------------------------------------
    # Text serialization
    # ------------------------------------------------------------------

    def to_text(self) -> str:
        """
        Serialize as "src dst ilabel olabel cost" and "state cost" lines.

        Start-state arcs come first so the reader can recover the start
        state; an empty FST serializes to the empty string.
        """
        if self.is_empty():
            return ""
        assert self.start is not None
        order = [self.start] + [s for s in range(self.num_states) if s != self.start]
        if not self._arcs[self.start] and self.num_arcs:
            raise WfstError("start state has no arcs; trim the FST before writing it")
        lines = []
        for state in order:
            for arc in self._arcs[state]:
                lines.append(
                    f"{arc.src}\t{arc.dst}\t{arc.ilabel}\t{arc.olabel}\t"
                    f"{format_cost(arc.weight)}"
                )
        for state in order:
            if state in self.finals:
                lines.append(f"{state}\t{format_cost(self.finals[state])}")
        return "\n".join(lines) + "\n" if lines else ""

    @classmethod
    def from_text(
        cls,
        text: str,
        input_alphabet: Optional[str] = None,
        output_alphabet: Optional[str] = None,
    ) -> "Fst":
        """Parse the text format; lines starting with '#' are skipped."""
        arcs: list[tuple[int, int, int, int, float]] = []
        finals: dict[int, float] = {}
        for number, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            try:
                if len(fields) == 5:
                    src, dst, ilabel, olabel = (int(f) for f in fields[:4])
                    arcs.append((src, dst, ilabel, olabel, -float(fields[4])))
                elif len(fields) == 2:
                    finals[int(fields[0])] = -float(fields[1])
                elif len(fields) == 1:
                    finals[int(fields[0])] = 0.0
                else:
                    raise ValueError(f"expected 1, 2 or 5 fields, got {len(fields)}")
            except ValueError as e:
                raise WfstError(f"line {number}: {e}") from e

        fst = cls(input_alphabet, output_alphabet)
        if not arcs and not finals:
            return fst
        start = arcs[0][0] if arcs else min(finals)
        built = cls.from_arcs(arcs, start, finals)
        built.input_alphabet = input_alphabet
        built.output_alphabet = output_alphabet
        return built


def format_cost(weight: float) -> str:
    text = f"{-weight:.6f}"
    return "0.000000" if text == "-0.000000" else text


# ----------------------------------------------------------------------
# Algebra
# ----------------------------------------------------------------------


def trim(a: Fst) -> Fst:
    """Keep only states that lie on some start-to-final path."""
    result = Fst(a.input_alphabet, a.output_alphabet)
    if a.is_empty():
        return result
    assert a.start is not None

    accessible = {a.start}
    stack = [a.start]
    while stack:
        state = stack.pop()
        for arc in a.arcs(state):
            if arc.dst not in accessible:
                accessible.add(arc.dst)
                stack.append(arc.dst)

    incoming: dict[int, list[int]] = {}
    for arc in a.iter_arcs():
        incoming.setdefault(arc.dst, []).append(arc.src)
    coaccessible = set(a.finals)
    stack = list(a.finals)
    while stack:
        state = stack.pop()
        for src in incoming.get(state, ()):
            if src not in coaccessible:
                coaccessible.add(src)
                stack.append(src)

    keep = sorted(accessible & coaccessible)
    if a.start not in coaccessible:
        return result

    remap = {old: new for new, old in enumerate(keep)}
    result.add_states(len(keep))
    result.set_start(remap[a.start])
    for old in keep:
        for arc in a.arcs(old):
            if arc.dst in remap:
                result.add_arc(
                    remap[old], remap[arc.dst], arc.ilabel, arc.olabel, arc.weight
                )
        if old in a.finals:
            result.set_final(remap[old], a.finals[old])
    return result


def compose(a: Fst, b: Fst) -> Fst:
    """
    Compose ``a`` (x:y) with ``b`` (y:z) into a trimmed x:z transducer.

    Epsilons are matched through a three-state filter: state 0 allows every
    move, 1 follows an output-epsilon move of ``a`` (``b`` waits), 2 follows
    an input-epsilon move of ``b`` (``a`` waits). Epsilon-epsilon matches
    happen only in state 0, which leaves exactly one composed path per pair
    of constituent paths.
    """
    if (
        a.output_alphabet is not None
        and b.input_alphabet is not None
        and a.output_alphabet != b.input_alphabet
    ):
        raise WfstError(
            f"alphabet mismatch: '{a.output_alphabet}' output composed with "
            f"'{b.input_alphabet}' input"
        )
    result = Fst(a.input_alphabet, b.output_alphabet)
    if a.is_empty() or b.is_empty():
        return result
    assert a.start is not None and b.start is not None

    by_label_cache: dict[int, dict[int, list[Arc]]] = {}

    def b_arcs_by_label(state: int) -> dict[int, list[Arc]]:
        table = by_label_cache.get(state)
        if table is None:
            table = {}
            for arc in b.arcs(state):
                table.setdefault(arc.ilabel, []).append(arc)
            by_label_cache[state] = table
        return table

    ids: dict[tuple[int, int, int], int] = {}
    queue: deque[tuple[int, int, int]] = deque()

    def state_of(key: tuple[int, int, int]) -> int:
        state = ids.get(key)
        if state is None:
            state = result.add_state()
            ids[key] = state
            queue.append(key)
        return state

    result.set_start(state_of((a.start, b.start, 0)))
    while queue:
        key = queue.popleft()
        sa, sb, mode = key
        src = ids[key]
        if sa in a.finals and sb in b.finals:
            result.set_final(src, a.finals[sa] + b.finals[sb])
        table = b_arcs_by_label(sb)
        for arc_a in a.arcs(sa):
            if arc_a.olabel == EPSILON:
                if mode != 2:
                    dst = state_of((arc_a.dst, sb, 1))
                    result.add_arc(src, dst, arc_a.ilabel, EPSILON, arc_a.weight)
                if mode == 0:
                    for arc_b in table.get(EPSILON, ()):
                        dst = state_of((arc_a.dst, arc_b.dst, 0))
                        result.add_arc(
                            src, dst, arc_a.ilabel, arc_b.olabel,
                            arc_a.weight + arc_b.weight,
                        )
            else:
                for arc_b in table.get(arc_a.olabel, ()):
                    dst = state_of((arc_a.dst, arc_b.dst, 0))
                    result.add_arc(
                        src, dst, arc_a.ilabel, arc_b.olabel,
                        arc_a.weight + arc_b.weight,
                    )
        if mode != 1:
            for arc_b in table.get(EPSILON, ()):
                dst = state_of((sa, arc_b.dst, 2))
                result.add_arc(src, dst, EPSILON, arc_b.olabel, arc_b.weight)

    return trim(result)


def project(a: Fst, side: Literal["input", "output"]) -> Fst:
    """Copy one tape onto both tapes."""
    if side not in ("input", "output"):
        raise WfstError(f"unknown projection side '{side}'")
    alphabet = a.input_alphabet if side == "input" else a.output_alphabet
    result = Fst(alphabet, alphabet)
    if a.is_empty():
        return result
    result.add_states(a.num_states)
    assert a.start is not None
    result.set_start(a.start)
    for arc in a.iter_arcs():
        label = arc.ilabel if side == "input" else arc.olabel
        result.add_arc(arc.src, arc.dst, label, label, arc.weight)
    for state, weight in a.finals.items():
        result.set_final(state, weight)
    return result


def _epsilon_order(a: Fst) -> list[int]:
    """Topological order of the epsilon subgraph; raises on epsilon cycles."""
    indegree = [0] * a.num_states
    for arc in a.iter_arcs():
        if arc.ilabel == EPSILON and arc.olabel == EPSILON:
            indegree[arc.dst] += 1
    ready = deque(s for s in range(a.num_states) if indegree[s] == 0)
    order = []
    while ready:
        state = ready.popleft()
        order.append(state)
        for arc in a.arcs(state):
            if arc.ilabel == EPSILON and arc.olabel == EPSILON:
                indegree[arc.dst] -= 1
                if indegree[arc.dst] == 0:
                    ready.append(arc.dst)
    if len(order) != a.num_states:
        raise WfstError("epsilon cycle found; epsilon removal needs an acyclic closure")
    return order


def rmepsilon(a: Fst, semiring: Semiring = "log") -> Fst:
    """
    Remove epsilon:epsilon arcs via per-state weighted epsilon closure.

    In the log semiring all epsilon paths between two states are summed; in
    the tropical semiring the best one is kept. Arcs with an epsilon input
    but a real output label cannot be removed and are rejected.
    """
    result = Fst(a.input_alphabet, a.output_alphabet)
    if a.is_empty():
        return result
    assert a.start is not None
    for arc in a.iter_arcs():
        if arc.ilabel == EPSILON and arc.olabel != EPSILON:
            raise WfstError(
                f"arc {arc.src}->{arc.dst} has input epsilon "
                f"but output label {arc.olabel}"
            )
    plus = _plus(semiring)
    rank = {state: i for i, state in enumerate(_epsilon_order(a))}

    result.add_states(a.num_states)
    result.set_start(a.start)
    for state in range(a.num_states):
        reach = {state}
        stack = [state]
        while stack:
            current = stack.pop()
            for arc in a.arcs(current):
                if arc.ilabel == EPSILON and arc.dst not in reach:
                    reach.add(arc.dst)
                    stack.append(arc.dst)
        closure = {state: 0.0}
        for current in sorted(reach, key=rank.__getitem__):
            if current not in closure:
                continue
            for arc in a.arcs(current):
                if arc.ilabel == EPSILON:
                    value = closure[current] + arc.weight
                    closure[arc.dst] = plus(closure.get(arc.dst, NEG_INF), value)

        final = NEG_INF
        for current in sorted(closure):
            weight = closure[current]
            for arc in a.arcs(current):
                if arc.ilabel != EPSILON:
                    result.add_arc(
                        state, arc.dst, arc.ilabel, arc.olabel, weight + arc.weight
                    )
            if current in a.finals:
                final = plus(final, weight + a.finals[current])
        if final != NEG_INF:
            result.set_final(state, final)
    return trim(result)


# ----------------------------------------------------------------------
# Search
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class BestPath:
    """Best path of an FST: its output labels, score and state sequence."""

    labels: tuple[int, ...]
    weight: float
    input_labels: tuple[int, ...]
    states: tuple[int, ...]

    def __iter__(self) -> Iterator[object]:
        # unpacks as (labels, weight)
        return iter((self.labels, self.weight))


def shortest_path(a: Fst) -> BestPath:
    """
    Maximum-score path in the tropical semiring.

    A label-correcting search that tolerates positive scores as long as no
    positive-score cycle exists. Among equal scores the lexicographically
    smallest state sequence wins.

    Raises:
        NoPathError: If the FST is empty or no final state is reachable.
        WfstError: If a positive-score cycle keeps improving paths.
    """
    if a.is_empty():
        raise NoPathError("shortest_path on an empty FST")
    assert a.start is not None

    n = a.num_states
    cost = [math.inf] * n
    path: list[Optional[tuple[int, ...]]] = [None] * n
    arc_path: list[tuple[Arc, ...]] = [()] * n
    cost[a.start] = 0.0
    path[a.start] = (a.start,)
    queue = deque([a.start])
    queued = [False] * n
    queued[a.start] = True
    budget = 4 * (n + 1) * (n + 1) + 16 * (a.num_arcs + 1)

    while queue:
        budget -= 1
        if budget < 0:
            raise WfstError("shortest_path did not converge (positive-score cycle?)")
        u = queue.popleft()
        queued[u] = False
        path_u = path[u]
        assert path_u is not None
        for arc in a.arcs(u):
            v = arc.dst
            candidate = cost[u] - arc.weight
            if candidate < cost[v]:
                better = True
            elif candidate == cost[v] and v not in path_u:
                current = path[v]
                better = current is None or path_u + (v,) < current
            else:
                better = False
            if better:
                cost[v] = candidate
                path[v] = path_u + (v,)
                arc_path[v] = arc_path[u] + (arc,)
                if not queued[v]:
                    queued[v] = True
                    queue.append(v)

    best_state: Optional[int] = None
    best_key: Optional[tuple[float, tuple[int, ...]]] = None
    for state, final in a.finals.items():
        if cost[state] == math.inf:
            continue
        state_path = path[state]
        assert state_path is not None
        key = (cost[state] - final, state_path)
        if best_key is None or key < best_key:
            best_key, best_state = key, state
    if best_state is None or best_key is None:
        raise NoPathError("no final state is reachable")

    arcs = arc_path[best_state]
    return BestPath(
        labels=tuple(arc.olabel for arc in arcs if arc.olabel != EPSILON),
        weight=-best_key[0],
        input_labels=tuple(arc.ilabel for arc in arcs if arc.ilabel != EPSILON),
        states=best_key[1],
    )


# ----------------------------------------------------------------------
# Diagnostics
# ----------------------------------------------------------------------


def enumerate_paths(
    a: Fst, max_arcs: int
) -> Iterator[tuple[tuple[int, ...], tuple[int, ...], float]]:
    """Yield (input labels, output labels, weight) of every successful path."""
    if a.is_empty():
        return
    assert a.start is not None
    stack: list[tuple[int, tuple[int, ...], tuple[int, ...], float, int]] = [
        (a.start, (), (), 0.0, 0)
    ]
    while stack:
        state, ilabels, olabels, weight, depth = stack.pop()
        if state in a.finals:
            yield ilabels, olabels, weight + a.finals[state]
        if depth == max_arcs:
            continue
        for arc in reversed(a.arcs(state)):
            stack.append(
                (
                    arc.dst,
                    ilabels + ((arc.ilabel,) if arc.ilabel != EPSILON else ()),
                    olabels + ((arc.olabel,) if arc.olabel != EPSILON else ()),
                    weight + arc.weight,
                    depth + 1,
                )
            )


def total_weight(a: Fst, max_arcs: int) -> float:
    """Log-sum-exp of all successful paths with at most ``max_arcs`` arcs."""
    if a.is_empty():
        return NEG_INF
    assert a.start is not None
    alpha = np.full(a.num_states, NEG_INF)
    alpha[a.start] = 0.0
    finals = np.full(a.num_states, NEG_INF)
    for state, weight in a.finals.items():
        finals[state] = weight
    total = float(np.logaddexp.reduce(alpha + finals))
    src = np.array([arc.src for arc in a.iter_arcs()], dtype=np.int64)
    dst = np.array([arc.dst for arc in a.iter_arcs()], dtype=np.int64)
    weight = np.array([arc.weight for arc in a.iter_arcs()], dtype=np.float64)
    for _ in range(max_arcs):
        nxt = np.full(a.num_states, NEG_INF)
        if len(src):
            np.logaddexp.at(nxt, dst, alpha[src] + weight)
        alpha = nxt
        total = log_add(total, float(np.logaddexp.reduce(alpha + finals)))
    return total
