"""
Tests for decoding, forced alignment and scoring.
"""

import math

import numpy as np
import pytest

from core.config import PipelineConfig
from services.decoder import (
    DecodeError,
    Hypothesis,
    InventoryMismatchError,
    build_decode_graph,
    edit_alignment,
    force_align,
    read_decode_graph,
    read_hypotheses,
    tse,
    viterbi_decode,
    wer,
    write_decode_graph,
    write_hypotheses,
)
from services.loss import LossConfig
from services.token_lm import estimate_ngram
from services.topology import (
    Segment,
    TimeConstraint,
    TopologySpec,
    apply_time_constraints,
    expand_durations,
    numerator_fst,
)
from services.units import (
    build_char_inventory,
    build_lexicon,
    finalize_inventory,
    train_wordpiece_vocab,
)
from services.wfst import Fst, compose, shortest_path, total_weight, unit_label

PLAIN = LossConfig()


def mono_system(topology: str = "hmm1", sentences=None):
    inv = finalize_inventory(build_char_inventory(["ab ba"]), topology)
    config = PipelineConfig(unit_type="mono-char", topology=topology)
    lex = build_lexicon(["ab", "ba"], inv)
    lm = estimate_ngram(sentences or [["ab"], ["ba"], ["ab", "ba"]], order=2)
    return inv, config, lex, build_decode_graph(lm, lex, config, inv)


def one_hot(frames, width: int, margin: float = 10.0) -> np.ndarray:
    logits = np.zeros((len(frames), width))
    logits[np.arange(len(frames)), frames] = margin
    return logits


def score_lattice(scores: np.ndarray) -> Fst:
    arcs = [
        (t, t + 1, unit_label(u), unit_label(u), float(scores[t, u]))
        for t in range(scores.shape[0])
        for u in range(scores.shape[1])
    ]
    fst = Fst.from_arcs(arcs, 0, {scores.shape[0]: 0.0})
    fst.input_alphabet = fst.output_alphabet = "units"
    return fst


def test_one_hot_logits_give_transcript_and_times():
    """Silence between words belongs to neither word."""
    inv, _, _, graph = mono_system()
    sil, a, b = 0, 1, 2

    logits = one_hot([a, a, b, b, sil, b, a, a], inv.size)

    hyp = viterbi_decode(logits, graph, PLAIN)

    assert hyp.words == ("ab", "ba")
    assert hyp.word_times == ((0, 4), (5, 8))


def test_unbounded_beam_matches_exact_shortest_path():
    """Beam search without pruning finds the exact best path."""
    inv, _, _, graph = mono_system("chain")
    rng = np.random.default_rng(0)

    for _ in range(5):
        logits = rng.normal(size=(6, inv.size))
        hyp = viterbi_decode(logits, graph, PLAIN, beam=math.inf)
        best = shortest_path(compose(score_lattice(logits), graph.fst))
        assert hyp.score == pytest.approx(best.weight, abs=1e-9)
        assert hyp.words == tuple(graph.words[label - 1] for label in best.labels)


def test_narrow_beam_never_beats_exact_search():
    """Pruning can only lose score."""
    inv, _, _, graph = mono_system("chain")
    logits = np.random.default_rng(1).normal(size=(8, inv.size))

    exact = viterbi_decode(logits, graph, PLAIN)
    pruned = viterbi_decode(logits, graph, PLAIN, beam=2.0)

    assert pruned.score <= exact.score + 1e-12


def test_uniform_logits_follow_the_lm():
    """With no acoustic evidence the most likely sentence wins."""
    sentences = [["ab"]] * 8 + [["ba"]]
    inv, _, _, graph = mono_system(sentences=sentences)

    hyp = viterbi_decode(np.zeros((4, inv.size)), graph, PLAIN)

    assert hyp.words == ("ab",)


def test_ctc_decode_graph_has_blank_loops():
    """CTC graphs carry blank self-loops and decode blank-separated pieces."""
    inv = finalize_inventory(train_wordpiece_vocab(["ab ba"], 4), "ctc")
    config = PipelineConfig(unit_type="wordpiece", topology="ctc")
    lex = build_lexicon(["ab", "ba"], inv)
    lm = estimate_ngram([["ab", "ba"], ["ba"]], order=2)
    graph = build_decode_graph(lm, lex, config, inv)
    blank = unit_label(inv.blank_id)

    loops = [
        a for a in graph.fst.iter_arcs() if a.ilabel == blank and a.src == a.dst
    ]
    frames = [*lex.units("ab"), inv.blank_id, *lex.units("ba"), inv.blank_id]
    hyp = viterbi_decode(one_hot(frames, inv.size), graph, PLAIN)

    assert loops
    assert hyp.words == ("ab", "ba")


def test_decode_graph_refuses_other_inventory():
    """A model with a different inventory is rejected."""
    _, _, _, graph = mono_system("hmm1")
    other = finalize_inventory(build_char_inventory(["abc"]), "hmm1")

    with pytest.raises(InventoryMismatchError):
        graph.check_inventory(other)


def test_decode_graph_lists_missing_words():
    """LM words without a lexicon entry are named."""
    inv = finalize_inventory(build_char_inventory(["ab ba"]), "hmm1")
    config = PipelineConfig(unit_type="mono-char", topology="hmm1")
    lex = build_lexicon(["ab"], inv)
    lm = estimate_ngram([["ab", "ba"]], order=1)

    with pytest.raises(DecodeError, match="ba"):
        build_decode_graph(lm, lex, config, inv)


def test_decode_graph_text_round_trip():
    """Header and arcs survive serialization."""
    _, _, _, graph = mono_system()

    back = read_decode_graph(write_decode_graph(graph))

    assert back.words == graph.words
    assert back.hashes == graph.hashes
    assert back.silent_units == graph.silent_units
    assert back.fst.to_text() == graph.fst.to_text()


def test_read_decode_graph_rejects_other_kinds():
    """Denominator files are not decode graphs."""
    with pytest.raises(DecodeError):
        read_decode_graph("# kind=den\n0\n")


def test_force_align_single_unit_covers_utterance():
    """One label spans every frame."""
    inv = finalize_inventory(build_char_inventory(["ab"]), "hmm1")
    num = numerator_fst([1], TopologySpec("hmm1"), inv)
    logits = np.random.default_rng(2).normal(size=(5, inv.size))

    alignment = force_align(logits, num, PLAIN, inv)

    assert alignment.segments == (Segment(1, 0, 5),)
    assert alignment.frames == (1, 1, 1, 1, 1)


def test_force_align_recovers_generating_boundaries():
    """Confident logits reproduce the segments they were drawn from."""
    inv = finalize_inventory(build_char_inventory(["ab"]), "chain")
    spec = TopologySpec("chain")
    labels, durations = [1, 2, 1, 1], [3, 2, 4, 2]
    frames = expand_durations(labels, durations, spec, inv)
    logits = one_hot(frames, inv.size, 8.0)
    logits += np.random.default_rng(3).normal(scale=0.1, size=logits.shape)
    num = numerator_fst(labels, spec, inv)

    alignment = force_align(logits, num, PLAIN, inv)

    assert alignment.segments == (
        Segment(1, 0, 3),
        Segment(2, 3, 5),
        Segment(1, 5, 9),
        Segment(1, 9, 11),
    )


def test_force_align_ctc_blank_runs_are_segments():
    """Blank runs form their own segments and the segments tile the utterance."""
    inv = finalize_inventory(build_char_inventory(["ab"]), "ctc")
    spec = TopologySpec("ctc")
    blank = inv.blank_id
    frames = expand_durations([1, 1], [2, 1], spec, inv, gaps=[1, 2, 1])
    num = numerator_fst([1, 1], spec, inv)

    alignment = force_align(one_hot(frames, inv.size), num, PLAIN, inv)

    assert alignment.segments == (
        Segment(blank, 0, 1),
        Segment(1, 1, 3),
        Segment(blank, 3, 5),
        Segment(1, 5, 6),
        Segment(blank, 6, 7),
    )


def test_alignment_satisfies_its_own_time_constraints():
    """Re-feeding an alignment at tolerance 0 keeps its path."""
    inv = finalize_inventory(build_char_inventory(["ab"]), "hmm1")
    num = numerator_fst([1, 2, 1], TopologySpec("hmm1"), inv, allow_silence=True)
    logits = np.random.default_rng(4).normal(size=(7, inv.size))
    alignment = force_align(logits, num, PLAIN, inv)

    frames = alignment.frames

    constrained = apply_time_constraints(
        num, TimeConstraint(alignment.segments, 0.0), inv
    )

    path = Fst.from_arcs(
        [(t, t + 1, unit_label(u), unit_label(u), 0.0) for t, u in enumerate(frames)],
        0,
        {len(frames): 0.0},
    )
    assert total_weight(compose(path, constrained), len(frames)) > -math.inf


def test_force_align_without_path_fails():
    """A numerator longer than the utterance cannot be aligned."""
    inv = finalize_inventory(build_char_inventory(["ab"]), "hmm1")
    num = numerator_fst([1, 2, 1], TopologySpec("hmm1"), inv)

    with pytest.raises(DecodeError):
        force_align(np.zeros((2, inv.size)), num, PLAIN, inv)


def test_wer_examples():
    """Deletion, identity and empty hypothesis."""
    assert wer({"u": "a b c".split()}, {"u": "a c".split()}) == pytest.approx(1 / 3)
    assert wer({"u": "a b".split()}, {"u": "a b".split()}) == 0.0
    assert wer({"u": "a b".split()}, {"u": []}) == 1.0


def test_wer_requires_every_hypothesis():
    """A missing utterance is an error."""
    with pytest.raises(DecodeError):
        wer({"u": ["a"], "v": ["b"]}, {"u": ["a"]})


def test_edit_alignment_marks_insertions():
    """Inserted hypothesis words pair with no reference word."""
    distance, pairs = edit_alignment(["a", "b"], ["a", "x", "b"])

    assert distance == 1
    assert pairs == [(0, 0), (None, 1), (1, 2)]


def test_tse_examples():
    """Identical stamps, constant offset and all-wrong words."""
    ref = {"u": [("a", 0, 3), ("b", 4, 6)]}
    same = {"u": Hypothesis(("a", "b"), ((0, 3), (4, 6)), 0.0)}
    shifted = {"u": Hypothesis(("a", "b"), ((1, 4), (5, 7)), 0.0)}
    wrong = {"u": Hypothesis(("x", "y"), ((0, 3), (4, 6)), 0.0)}

    assert tse(ref, same, frame_ms=10.0, stride=4) == 0.0
    assert tse(ref, shifted, frame_ms=10.0, stride=4) == pytest.approx(40.0)
    assert tse(ref, wrong, frame_ms=10.0, stride=4) is None


def test_tse_ignores_inserted_words():
    """Insertions do not change the time-stamp error."""
    ref = {"u": [("a", 0, 3), ("b", 4, 6)]}
    plain = {"u": Hypothesis(("a", "b"), ((1, 3), (4, 7)), 0.0)}
    inserted = {
        "u": Hypothesis(("a", "x", "b"), ((1, 3), (3, 4), (4, 7)), 0.0)
    }

    assert tse(ref, inserted, 10.0, 4) == tse(ref, plain, 10.0, 4)


def test_hypothesis_text_round_trip():
    """The timed-word format reads back what it wrote."""
    hyps = {
        "u2": Hypothesis(("ab", "ba"), ((0, 4), (5, 8)), -12.5),
        "u1": Hypothesis((), (), 0.0),
    }

    text = write_hypotheses(hyps)

    assert text.splitlines()[1] == "u2\tab[0,4] ba[5,8]\t-12.500000"
    assert read_hypotheses(text) == hyps


def test_read_hypotheses_rejects_malformed_words():
    """Words need their [start,end] stamps."""
    with pytest.raises(DecodeError):
        read_hypotheses("u\tab\t0.0\n")
