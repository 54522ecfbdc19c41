"""
Tests for the weighted FST core.

Composition, trimming and epsilon removal are checked against brute-force
path enumeration on small random acyclic machines.
"""

import math

import numpy as np
import pytest
from scipy.special import logsumexp

from services.wfst import (
    EPSILON,
    Fst,
    NoPathError,
    WfstError,
    compose,
    enumerate_paths,
    project,
    rmepsilon,
    shortest_path,
    total_weight,
    trim,
)


def random_acyclic_fst(rng: np.random.Generator, num_labels: int = 2) -> Fst:
    """Random machine whose arcs only go forward so every sum is finite."""
    n = int(rng.integers(2, 6))
    fst = Fst()
    fst.add_states(n)
    fst.set_start(0)
    for src in range(n):
        for dst in range(src + 1, n):
            for _ in range(int(rng.integers(0, 3))):
                fst.add_arc(
                    src,
                    dst,
                    int(rng.integers(0, num_labels + 1)),
                    int(rng.integers(0, num_labels + 1)),
                    float(rng.uniform(-1.0, 0.0)),
                )
        if rng.random() < 0.5 or src == n - 1:
            fst.set_final(src, float(rng.uniform(-0.5, 0.0)))
    return fst


def relation(fst: Fst, max_arcs: int = 30) -> dict[tuple, float]:
    """(input labels, output labels) -> log-sum-exp weight."""
    result: dict[tuple, float] = {}
    for ilabels, olabels, weight in enumerate_paths(fst, max_arcs):
        key = (ilabels, olabels)
        result[key] = float(np.logaddexp(result.get(key, -math.inf), weight))
    return result


def brute_force_compose_total(a: Fst, b: Fst) -> float:
    weights = [
        wa + wb
        for _, a_out, wa in enumerate_paths(a, 10)
        for b_in, _, wb in enumerate_paths(b, 10)
        if a_out == b_in
    ]
    return float(logsumexp(weights)) if weights else -math.inf


def acceptor(labels: list[int], weight: float = 0.0) -> Fst:
    arcs = [(i, i + 1, label, label, 0.0) for i, label in enumerate(labels)]
    return Fst.from_arcs(arcs, 0, {len(labels): weight})


def test_compose_relabels_unweighted_string():
    """An acceptor of 'ab' through a relabeling transducer gives 'xy'."""
    a = acceptor([1, 2])
    b = Fst.from_arcs([(0, 0, 1, 10, 0.0), (0, 0, 2, 11, 0.0)], 0, {0: 0.0})

    paths = relation(compose(a, b))

    assert paths == {((1, 2), (10, 11)): 0.0}


def test_compose_with_empty_is_empty():
    """Composing with an empty FST yields an empty FST, not an error."""
    a = acceptor([1, 2])

    assert compose(a, Fst()).is_empty()
    assert compose(Fst(), a).is_empty()


def test_compose_adds_log_weights():
    """Weights of the constituent paths add."""
    a = Fst.from_arcs([(0, 1, 1, 1, -1.0)], 0, {1: 0.0})
    b = Fst.from_arcs([(0, 1, 1, 1, -0.5)], 0, {1: 0.0})

    paths = relation(compose(a, b))

    assert paths[((1,), (1,))] == pytest.approx(-1.5, abs=1e-12)


def test_compose_rejects_alphabet_mismatch():
    """Declared alphabets must agree on the shared tape."""
    a = Fst(input_alphabet="units", output_alphabet="labels")
    b = Fst(input_alphabet="words", output_alphabet="words")

    with pytest.raises(WfstError, match="alphabet mismatch"):
        compose(a, b)


def test_compose_epsilon_paths_counted_once():
    """Epsilon on both shared tapes must not produce duplicate paths."""
    a = Fst.from_arcs([(0, 1, 1, EPSILON, -0.3)], 0, {1: 0.0})
    b = Fst.from_arcs([(0, 1, EPSILON, 2, -0.2)], 0, {1: 0.0})

    result = compose(a, b)

    assert total_weight(result, 5) == pytest.approx(-0.5, abs=1e-12)
    assert len(list(enumerate_paths(result, 5))) == 1


@pytest.mark.parametrize("seed", range(40))
def test_compose_matches_brute_force(seed):
    """Total weight of compose(a, b) equals pairwise path enumeration."""
    rng = np.random.default_rng(seed)
    a = random_acyclic_fst(rng)
    b = random_acyclic_fst(rng)

    expected = brute_force_compose_total(a, b)
    actual = total_weight(compose(a, b), 20)

    if expected == -math.inf:
        assert actual == -math.inf
    else:
        assert actual == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("seed", range(15))
def test_compose_is_associative(seed):
    """(a o b) o c and a o (b o c) accept the same weighted relation."""
    rng = np.random.default_rng(1000 + seed)
    a, b, c = (random_acyclic_fst(rng) for _ in range(3))

    left = relation(compose(compose(a, b), c))
    right = relation(compose(a, compose(b, c)))

    assert left.keys() == right.keys()
    for key, weight in left.items():
        assert right[key] == pytest.approx(weight, abs=1e-9)


def test_trim_removes_dead_end_state():
    """A branch that never reaches a final state is dropped."""
    fst = Fst.from_arcs([(0, 1, 1, 1, -0.1), (0, 2, 2, 2, -0.2)], 0, {1: 0.0})

    trimmed = trim(fst)

    assert trimmed.num_states == fst.num_states - 1
    assert relation(trimmed) == relation(fst)


def test_trim_is_idempotent():
    """Trimming an already trimmed FST changes nothing."""
    fst = trim(random_acyclic_fst(np.random.default_rng(7)))

    again = trim(fst)

    assert again.num_states == fst.num_states
    assert relation(again) == relation(fst)


def test_trim_disconnected_start_gives_empty():
    """No start-to-final path means an empty result."""
    fst = Fst.from_arcs([(1, 2, 1, 1, 0.0)], 0, {2: 0.0})

    assert trim(fst).is_empty()


@pytest.mark.parametrize("seed", range(10))
def test_trim_preserves_total_weight(seed):
    """Total acceptance weight is unchanged by trimming."""
    fst = random_acyclic_fst(np.random.default_rng(200 + seed))

    expected = total_weight(fst, 10)
    assert total_weight(trim(fst), 10) == pytest.approx(expected, abs=1e-12)


def test_project_output_gives_acceptor():
    """Projecting a->x on the output side accepts x."""
    fst = Fst.from_arcs([(0, 1, 1, 9, -2.0)], 0, {1: 0.0})

    projected = project(fst, "output")

    assert projected.is_acceptor()
    assert relation(projected) == {((9,), (9,)): -2.0}


def test_project_acceptor_is_identity():
    """An acceptor projects onto itself on either side."""
    fst = acceptor([1, 2, 3], weight=-0.5)

    assert relation(project(fst, "input")) == relation(fst)
    assert relation(project(fst, "output")) == relation(fst)


def test_project_rejects_unknown_side():
    """Only input and output are tapes."""
    with pytest.raises(WfstError):
        project(acceptor([1]), "middle")  # type: ignore[arg-type]


def test_shortest_path_picks_best_parallel_arc():
    """Of two parallel arcs the higher score wins."""
    fst = Fst.from_arcs([(0, 1, 1, 1, -1.0), (0, 1, 2, 2, -2.0)], 0, {1: 0.0})

    labels, weight = shortest_path(fst)

    assert labels == (1,)
    assert weight == pytest.approx(-1.0)


def test_shortest_path_single_path():
    """A single path is returned as is."""
    best = shortest_path(acceptor([3, 1, 2], weight=-0.25))

    assert best.labels == (3, 1, 2)
    assert best.weight == pytest.approx(-0.25)
    assert best.states == (0, 1, 2, 3)


def test_shortest_path_tie_breaks_on_state_sequence():
    """Equal scores resolve to the smallest state-id sequence."""
    fst = Fst.from_arcs(
        [(0, 2, 5, 5, -1.0), (0, 1, 4, 4, -1.0), (1, 3, 1, 1, 0.0), (2, 3, 1, 1, 0.0)],
        0,
        {3: 0.0},
    )

    best = shortest_path(fst)

    assert best.states == (0, 1, 3)
    assert best.labels == (4, 1)


def test_shortest_path_empty_raises():
    """An empty FST has no best path."""
    with pytest.raises(NoPathError):
        shortest_path(Fst())


def test_shortest_path_handles_self_loops():
    """Non-positive loops are never taken when they only lower the score."""
    fst = Fst.from_arcs([(0, 0, 1, 1, -0.1), (0, 1, 2, 2, -0.3)], 0, {1: 0.0})

    labels, weight = shortest_path(fst)

    assert labels == (2,)
    assert weight == pytest.approx(-0.3)


def test_rmepsilon_log_sums_epsilon_paths():
    """Two epsilon routes to the same arc merge their weights."""
    fst = Fst.from_arcs(
        [
            (0, 1, EPSILON, EPSILON, math.log(0.25)),
            (0, 2, EPSILON, EPSILON, math.log(0.75)),
            (1, 3, EPSILON, EPSILON, 0.0),
            (2, 3, EPSILON, EPSILON, 0.0),
            (3, 4, 7, 7, -1.0),
        ],
        0,
        {4: 0.0},
    )

    result = rmepsilon(fst)

    assert not result.has_input_epsilons()
    assert relation(result) == {((7,), (7,)): pytest.approx(-1.0, abs=1e-12)}


def test_rmepsilon_tropical_keeps_best_route():
    """The tropical closure keeps only the best epsilon route."""
    fst = Fst.from_arcs(
        [
            (0, 1, EPSILON, EPSILON, -2.0),
            (0, 1, EPSILON, EPSILON, -1.0),
            (1, 2, 3, 3, 0.0),
        ],
        0,
        {2: 0.0},
    )

    result = rmepsilon(fst, semiring="tropical")

    assert relation(result)[((3,), (3,))] == pytest.approx(-1.0)


@pytest.mark.parametrize("seed", range(10))
def test_rmepsilon_preserves_relation(seed):
    """Epsilon removal on random acceptors keeps every weighted string."""
    rng = np.random.default_rng(300 + seed)
    fst = project(random_acyclic_fst(rng), "input")

    before = relation(fst)
    after = relation(rmepsilon(fst))

    assert before.keys() == after.keys()
    for key, weight in before.items():
        assert after[key] == pytest.approx(weight, abs=1e-9)


def test_rmepsilon_rejects_epsilon_cycle():
    """Epsilon cycles have no finite closure here."""
    fst = Fst.from_arcs(
        [
            (0, 1, EPSILON, EPSILON, -1.0),
            (1, 0, EPSILON, EPSILON, -1.0),
            (1, 2, 1, 1, 0.0),
        ],
        0,
        {2: 0.0},
    )

    with pytest.raises(WfstError, match="epsilon cycle"):
        rmepsilon(fst)


def test_rmepsilon_rejects_output_only_arcs():
    """Input-epsilon arcs with a real output label cannot be removed."""
    fst = Fst.from_arcs([(0, 1, EPSILON, 4, 0.0)], 0, {1: 0.0})

    with pytest.raises(WfstError):
        rmepsilon(fst)


def test_text_round_trip_is_bit_exact():
    """Write, read and write again yields the same bytes."""
    fst = trim(random_acyclic_fst(np.random.default_rng(11)))

    text = fst.to_text()

    assert Fst.from_text(text).to_text() == text


def test_text_format_fields():
    """Arcs carry costs with six fractional digits; finals follow."""
    fst = Fst.from_arcs([(0, 1, 1, 2, -1.5)], 0, {1: 0.0})

    assert fst.to_text() == "0\t1\t1\t2\t1.500000\n1\t0.000000\n"


def test_text_empty_fst_is_empty_string():
    """An empty FST is an empty file and reads back empty."""
    assert Fst().to_text() == ""
    assert Fst.from_text("").is_empty()


def test_from_text_skips_header_comments():
    """Metadata header lines are ignored by the reader."""
    fst = Fst.from_text("# unit_type=mono-char\n0\t1\t3\t3\t0.500000\n1\t0.000000\n")

    assert relation(fst) == {((3,), (3,)): -0.5}


def test_from_text_rejects_malformed_line():
    """Lines with the wrong field count name their line number."""
    with pytest.raises(WfstError, match="line 1"):
        Fst.from_text("0\t1\t2\n")


def test_add_arc_rejects_non_finite_weight():
    """Zero-weight arcs are dropped by builders, never stored."""
    fst = Fst()
    fst.add_states(2)

    with pytest.raises(WfstError):
        fst.add_arc(0, 1, 1, 1, -math.inf)


def test_total_weight_counts_all_lengths():
    """A self-loop acceptor sums the geometric series up to the bound."""
    fst = Fst.from_arcs([(0, 0, 1, 1, math.log(0.5))], 0, {0: 0.0})

    expected = math.log(sum(0.5**k for k in range(4)))

    assert total_weight(fst, 3) == pytest.approx(expected, abs=1e-12)
