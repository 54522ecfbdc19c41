"""
Tests for denominator and numerator graph construction.
"""

import itertools
import math

import numpy as np
import pytest

from core.config import PipelineConfig
from services.graphs import (
    CHAIN,
    DenGraph,
    GraphBuildError,
    NumGraph,
    build_den,
    build_den_ctc_wordpiece,
    build_den_hmm,
    build_num,
    chain_view,
    check_den_inventory,
    chenone_segments,
    den_lm_sequences,
    hmm_den_to_ctc_den,
    lm_symbols,
    read_graph,
    system_segments,
    trichar_frame_labels,
    write_graph,
)
from services.token_lm import NgramLm, estimate_ngram, lm_to_fst
from services.topology import (
    Segment,
    TopologySpec,
    collapse,
    numerator_fst,
    topology_fst,
)
from services.units import (
    BLANK,
    SILENCE,
    ChenoneTree,
    Unit,
    UnitInventory,
    UnitKind,
    build_char_inventory,
    cluster_bichar,
    finalize_inventory,
    tokenize_wordpiece,
    train_wordpiece_vocab,
)
from services.wfst import (
    Fst,
    compose,
    enumerate_paths,
    label_unit,
    project,
    rmepsilon,
    total_weight,
    trim,
    unit_label,
)

CTC = TopologySpec("ctc")
HMM1 = TopologySpec("hmm1")


def acceptor(units) -> Fst:
    arcs = [(i, i + 1, unit_label(u), unit_label(u), 0.0) for i, u in enumerate(units)]
    return Fst.from_arcs(arcs, 0, {len(units): 0.0})


def string_weight(fst: Fst, units) -> float:
    return total_weight(compose(acceptor(units), fst), len(units))


def accepted(fst: Fst, length: int) -> set[tuple[int, ...]]:
    return {
        tuple(label_unit(label) for label in ilabels)
        for ilabels, _, _ in enumerate_paths(fst, length)
        if len(ilabels) == length
    }


def assert_same_weight(a: float, b: float) -> None:
    if a == -math.inf or b == -math.inf:
        assert a == b
    else:
        assert a == pytest.approx(b, abs=1e-9)


def mono(*symbols: str, silence: bool = False) -> UnitInventory:
    units = tuple(Unit(UnitKind.CHAR, symbol=s) for s in symbols)
    return UnitInventory(((SILENCE,) if silence else ()) + units, "mono-char")


def wordpieces(*pieces: str) -> UnitInventory:
    units = tuple(Unit(UnitKind.WORDPIECE, symbol=p) for p in pieces)
    return UnitInventory(units, "wordpiece")


def direct_ctc_den(lm: NgramLm, inv: UnitInventory) -> Fst:
    symbols, alphabet = lm_symbols(inv)
    composed = compose(topology_fst(CTC, inv), lm_to_fst(lm, symbols, alphabet))
    return trim(rmepsilon(project(composed, "input")))


def test_mono_char_hmm1_den_matches_segmentation_oracle():
    """Uniform unigram: weight(x) = (1 + changes)·ln(1/3) + repeats·ln(4/3)."""
    inv = finalize_inventory(mono("a", "b", silence=True), "hmm1")
    third = math.log10(1 / 3)
    tokens = ("<sil>", "char:a", "char:b")
    lm = NgramLm(1, tokens, {(): {t: third for t in tokens}})

    den = build_den_hmm(lm, HMM1, inv)

    for length in range(1, 5):
        for units in itertools.product(range(3), repeat=length):
            changes = sum(1 for x, y in zip(units, units[1:]) if x != y)
            repeats = length - 1 - changes
            expected = (1 + changes) * math.log(1 / 3) + repeats * math.log(4 / 3)
            assert string_weight(den.fst, units) == pytest.approx(expected, abs=1e-9)


def test_den_is_epsilon_free_and_trimmed():
    """Prepared denominators carry no epsilon and no dead states."""
    inv = finalize_inventory(mono("a", "b", silence=True), "chain")
    lm = estimate_ngram([["char:a", "<sil>", "char:b"], ["char:b"]], order=3)

    den = build_den_hmm(lm, CHAIN, inv)

    assert not den.fst.has_input_epsilons()
    assert trim(den.fst).num_states == den.fst.num_states
    assert all(label_unit(label) < inv.size for label in den.fst.input_symbols())


def test_ctc_split_doubles_states():
    """An N-state chain denominator becomes 2N states."""
    inv = finalize_inventory(mono("a", "b"), "ctc")
    lm = estimate_ngram([["char:a", "char:b"], ["char:b", "char:b"]], order=2)
    chain = build_den_hmm(lm, CHAIN, chain_view(inv))

    ctc = hmm_den_to_ctc_den(chain, inv)

    assert ctc.fst.num_states == 2 * chain.fst.num_states
    assert ctc.topology == "ctc"


def test_ctc_split_rejects_hmm1_denominator():
    """HMM1 denominators are refused with a pointer to the chain route."""
    inv = finalize_inventory(mono("a", "b"), "ctc")
    lm = estimate_ngram([["char:a", "char:b"]], order=2)
    hmm1_inv = finalize_inventory(mono("a", "b"), "hmm1")
    hmm1 = build_den_hmm(lm, TopologySpec("hmm1"), hmm1_inv)

    with pytest.raises(GraphBuildError, match="chain_view"):
        hmm_den_to_ctc_den(hmm1, inv)


def test_ctc_split_of_single_sentence_den():
    """A den for 'a b' accepts 'a φ b' and 'φ a b φ'; all collapse to 'a b'."""
    inv = finalize_inventory(mono("a", "b"), "ctc")
    a, b, blank = 0, 1, inv.blank_id
    lm = NgramLm(
        2,
        ("char:a", "char:b"),
        {
            ("<s>",): {"char:a": 0.0},
            ("char:a",): {"char:b": 0.0},
            ("char:b",): {"</s>": 0.0},
        },
    )

    ctc = hmm_den_to_ctc_den(build_den_hmm(lm, CHAIN, chain_view(inv)), inv)

    strings = set().union(*(accepted(ctc.fst, n) for n in range(2, 6)))
    assert (a, blank, b) in strings
    assert (blank, a, b, blank) in strings
    assert (a, blank, a, b) not in strings
    assert all(collapse(list(s), CTC, inv) == [a, b] for s in strings)


def test_ctc_split_matches_direct_ctc_composition():
    """Splitting the chain den equals composing the CTC topology directly."""
    inv = finalize_inventory(wordpieces("▁a", "b"), "ctc")
    lm = estimate_ngram(
        [["wp:▁a", "wp:b"], ["wp:▁a"], ["wp:b", "wp:b", "wp:▁a"]], order=2
    )

    split = hmm_den_to_ctc_den(build_den_hmm(lm, CHAIN, chain_view(inv)), inv)
    direct = build_den_ctc_wordpiece(lm, inv)

    for length in range(1, 5):
        for units in itertools.product(range(3), repeat=length):
            assert_same_weight(
                string_weight(split.fst, units), string_weight(direct.fst, units)
            )


@pytest.mark.parametrize("seed", range(20))
def test_ctc_split_preserves_language_on_random_lms(seed):
    """Random tiny LMs: split and direct CTC graphs weigh every short string alike."""
    rng = np.random.default_rng(seed)
    tokens = ["char:a", "char:b"]
    corpus = [
        [tokens[i] for i in rng.integers(0, 2, size=rng.integers(1, 4))]
        for _ in range(4)
    ]
    lm = estimate_ngram(corpus, order=int(rng.integers(1, 4)))
    inv = finalize_inventory(mono("a", "b"), "ctc")

    split = hmm_den_to_ctc_den(build_den_hmm(lm, CHAIN, chain_view(inv)), inv)
    direct = direct_ctc_den(lm, inv)

    for length in range(1, 5):
        for units in itertools.product(range(3), repeat=length):
            assert_same_weight(
                string_weight(split.fst, units), string_weight(direct, units)
            )


def test_ctc_split_rejects_wrong_inputs():
    """Needs a chain den and a Blank unit."""
    inv = finalize_inventory(mono("a", "b"), "hmm1")
    lm = NgramLm(1, ("char:a", "char:b"), {(): {"char:a": -0.3, "char:b": -0.3}})
    den = build_den_hmm(lm, HMM1, inv)

    with pytest.raises(GraphBuildError, match="chain"):
        hmm_den_to_ctc_den(den, finalize_inventory(mono("a", "b"), "ctc"))
    chain = build_den_hmm(lm, CHAIN, finalize_inventory(mono("a", "b"), "chain"))
    with pytest.raises(GraphBuildError, match="Blank"):
        hmm_den_to_ctc_den(chain, inv)


def test_wordpiece_ctc_unigram_den_matches_collapse_oracle():
    """Each string weighs the unigram probability of its collapsed labels."""
    inv = finalize_inventory(wordpieces("▁a", "b"), "ctc")
    probs = {"wp:▁a": 0.25, "wp:b": 0.75}
    lm = NgramLm(1, tuple(probs), {(): {t: math.log10(p) for t, p in probs.items()}})
    by_unit = {0: 0.25, 1: 0.75}

    den = build_den_ctc_wordpiece(lm, inv)

    for length in range(1, 5):
        for units in itertools.product(range(3), repeat=length):
            labels = collapse(list(units), CTC, inv)
            expected = sum(math.log(by_unit[u]) for u in labels)
            assert string_weight(den.fst, units) == pytest.approx(expected, abs=1e-9)


def test_wordpiece_excluded_by_lm_appears_on_no_arc():
    """A piece the LM never emits is absent from the denominator."""
    inv = finalize_inventory(wordpieces("▁a", "b"), "ctc")
    lm = NgramLm(1, ("wp:▁a",), {(): {"wp:▁a": 0.0}})

    den = build_den_ctc_wordpiece(lm, inv)

    assert unit_label(1) not in den.fst.input_symbols()
    assert unit_label(0) in den.fst.input_symbols()


def test_wordpiece_ctc_den_rejects_silence_inventory():
    """wp-CTC inventories must not model silence."""
    inv = UnitInventory(
        (SILENCE, Unit(UnitKind.WORDPIECE, symbol="▁a"), BLANK), "wordpiece", "ctc"
    )
    lm = NgramLm(1, ("wp:▁a",), {(): {"wp:▁a": 0.0}})

    with pytest.raises(GraphBuildError, match="Silence"):
        build_den_ctc_wordpiece(lm, inv)


def test_default_den_lm_orders():
    """Order 3 for wordpiece systems, 4 for chenone systems."""
    wp = PipelineConfig(unit_type="wordpiece", topology="ctc")
    ch = PipelineConfig(
        unit_type="chenone",
        topology="chain",
        alignments="a.txt",
        alignment_inventory="i.tsv",
    )

    assert wp.effective_den_lm_order == 3
    assert ch.effective_den_lm_order == 4


def test_bichar_numerator_silence_between_words_only():
    """bc-HMM numerator: silence may separate 'ab' and 'ba' but not split them."""
    inv = finalize_inventory(cluster_bichar(["ab ba"], max_units=5), "hmm1")
    config = PipelineConfig(unit_type="bi-char", topology="hmm1")

    num = build_num("u1", ["ab", "ba"], config, inv)

    strings = accepted(num.fst, 5)
    assert (1, 3, 0, 2, 4) in strings
    assert (0, 1, 3, 2, 4) in strings
    assert (1, 0, 3, 2, 4) not in strings
    assert (1, 3, 2, 0, 4) not in strings


def test_wordpiece_ctc_numerator_for_am():
    """'am' over {▁a, m}: blank-interleaved realisations of the two pieces."""
    inv = finalize_inventory(wordpieces("m", "▁a"), "ctc")
    config = PipelineConfig(unit_type="wordpiece", topology="ctc")
    m, a, blank = 0, 1, inv.blank_id

    num = build_num("u1", ["am"], config, inv)

    assert accepted(num.fst, 2) == {(a, m)}
    assert (blank, a, blank, m) in accepted(num.fst, 4)
    assert (a, a, m, blank) in accepted(num.fst, 4)


def chenone_setup(topology: str) -> tuple[UnitInventory, ChenoneTree]:
    tree = ChenoneTree.from_tsv("a\tL\t0\nb\tL\t1\n")
    base = UnitInventory(
        (SILENCE, Unit(UnitKind.CHENONE, index=0), Unit(UnitKind.CHENONE, index=1)),
        "chenone",
    )
    return finalize_inventory(base, topology), tree


def chenone_config(topology: str, tolerance: float = 5.0) -> PipelineConfig:
    return PipelineConfig(
        unit_type="chenone",
        topology=topology,
        alignments="ali.txt",
        alignment_inventory="bc.tsv",
        tolerance=tolerance,
    )


def test_chenone_ctc_numerator_removes_repetitions():
    """Segments 'k k æ' give labels 'k æ' and no time constraints."""
    inv, _ = chenone_setup("ctc")
    segments = [Segment(1, 0, 2), Segment(1, 2, 3), Segment(2, 3, 5)]

    num = build_num("u1", ["ab"], chenone_config("ctc"), inv, segments=segments)

    expected = numerator_fst([1, 2], CTC, inv)
    for length in range(2, 6):
        assert accepted(num.fst, length) == accepted(expected, length)
    assert not num.constrained


def test_chenone_hmm_numerator_is_time_constrained():
    """Tolerance 0 pins the numerator to the alignment itself."""
    inv, _ = chenone_setup("hmm1")
    segments = [Segment(0, 0, 1), Segment(1, 1, 3), Segment(2, 3, 4)]

    num = build_num("u1", ["ab"], chenone_config("hmm1", 0.0), inv, segments=segments)

    assert num.constrained
    assert accepted(num.fst, 4) == {(0, 1, 1, 2)}


def test_chenone_numerator_needs_alignment():
    """No segments, no chenone numerator."""
    inv, _ = chenone_setup("hmm1")

    with pytest.raises(GraphBuildError, match="alignment"):
        build_num("u9", ["ab"], chenone_config("hmm1"), inv)


def test_untokenizable_word_is_reported():
    """A word outside the wordpiece alphabet fails with the utterance id."""
    inv = finalize_inventory(wordpieces("▁a"), "ctc")
    config = PipelineConfig(unit_type="wordpiece", topology="ctc")

    with pytest.raises(GraphBuildError, match="u7"):
        build_num("u7", ["z"], config, inv)


def numerator_strings_in_den(num: NumGraph, den: DenGraph, lengths) -> None:
    for length in lengths:
        strings = accepted(num.fst, length)
        assert strings
        for units in strings:
            assert string_weight(den.fst, units) > -math.inf, units


def test_mono_char_hmm_numerator_paths_are_den_paths():
    """mc-HMM: every numerator string is a denominator string."""
    transcripts = [["ab", "b"], ["a"]]
    inv = finalize_inventory(build_char_inventory(["ab b", "a"]), "hmm1")
    config = PipelineConfig(unit_type="mono-char", topology="hmm1")
    lm = estimate_ngram(den_lm_sequences(transcripts, inv, 0.5, seed=0), order=2)

    den = build_den(lm, config, inv)
    num = build_num("u1", transcripts[0], config, inv)

    numerator_strings_in_den(num, den, range(3, 6))


def test_bichar_chain_numerator_paths_are_den_paths():
    """bc-HMM with the chain topology through the bi-char context transducer."""
    transcripts = [["ab", "ba"], ["aab"]]
    inv = finalize_inventory(cluster_bichar(["ab ba", "aab"], max_units=5), "chain")
    config = PipelineConfig(unit_type="bi-char", topology="chain")
    lm = estimate_ngram(den_lm_sequences(transcripts, inv, 0.3, seed=1), order=3)

    den = build_den(lm, config, inv)
    num = build_num("u1", transcripts[0], config, inv)

    numerator_strings_in_den(num, den, range(4, 7))


def test_chenone_ctc_numerator_paths_are_den_paths():
    """ch-CTC through the tree context transducer and the blank split."""
    inv, tree = chenone_setup("ctc")
    transcripts = [["ab", "b"], ["ba"]]
    sequences = den_lm_sequences(transcripts, inv, 0.3, seed=2, tree=tree)
    lm = estimate_ngram(sequences, order=3)
    segments = [Segment(0, 0, 1), Segment(1, 1, 2), Segment(2, 2, 3), Segment(2, 3, 4)]

    den = build_den(lm, chenone_config("ctc"), inv, tree)
    num = build_num("u1", transcripts[0], chenone_config("ctc"), inv, tree, segments)

    assert den.topology == "ctc"
    assert inv.blank_id is not None
    assert unit_label(inv.blank_id) in den.fst.input_symbols()
    numerator_strings_in_den(num, den, range(3, 6))


def test_chenone_hmm_den_uses_tree_units():
    """Chain chenone denominators read chenone, second-version and silence units."""
    inv, tree = chenone_setup("chain")
    lm = estimate_ngram(
        den_lm_sequences([["ab"], ["b", "a"]], inv, 0.3, seed=3, tree=tree), order=2
    )

    den = build_den(lm, chenone_config("chain"), inv, tree)

    units = {label_unit(label) for label in den.fst.input_symbols()}
    assert {0, 1, 2} <= units
    assert units <= set(range(inv.size))
    assert den.hashes["tree"]


def test_chenone_segments_relabel_bichar_alignment():
    """Non-silence segments take the tree leaf of their tri-char."""
    inv, tree = chenone_setup("hmm1")
    bichar = [Segment(0, 0, 2), Segment(5, 2, 4), Segment(7, 4, 5), Segment(0, 5, 6)]

    result = chenone_segments(bichar, ["ab"], tree, inv, silence_id=0)

    assert result == [
        Segment(0, 0, 2),
        Segment(1, 2, 4),
        Segment(2, 4, 5),
        Segment(0, 5, 6),
    ]


def test_chenone_segments_count_mismatch():
    """Alignment and transcript must cover the same characters."""
    inv, tree = chenone_setup("hmm1")

    with pytest.raises(GraphBuildError, match="covers 1"):
        chenone_segments([Segment(3, 0, 2)], ["ab"], tree, inv, silence_id=0)


def test_system_segments_merge_wordpieces_and_blank_pauses():
    """A wordpiece spans its characters; pauses become Blank without Silence."""
    inv = finalize_inventory(train_wordpiece_vocab(["ab"], 10), "ctc")
    chars = [Segment(0, 0, 2), Segment(1, 2, 4), Segment(2, 4, 7)]

    result = system_segments(chars, ["ab"], inv, silence_id=0)

    (piece,) = tokenize_wordpiece("ab", inv)
    assert inv.units[piece].symbol == "\u2581ab"
    assert result == [Segment(inv.blank_id, 0, 2), Segment(piece, 2, 7)]


def test_system_segments_keep_character_units():
    """Mono-char systems share the ids of the character inventory."""
    inv = finalize_inventory(build_char_inventory(["ab"]), "chain")
    chars = [Segment(1, 0, 2), Segment(2, 2, 3), Segment(0, 3, 5)]

    assert system_segments(chars, ["ab"], inv, silence_id=0) == chars


def test_system_segments_count_mismatch():
    """Alignment and transcript must cover the same characters."""
    inv = finalize_inventory(build_char_inventory(["ab"]), "hmm1")

    with pytest.raises(GraphBuildError, match="covers 1"):
        system_segments([Segment(1, 0, 2)], ["ab"], inv, silence_id=0)


def test_trichar_frame_labels():
    """Frame labels repeat the segment tri-char; silence frames are None."""
    segments = [Segment(0, 0, 1), Segment(4, 1, 3), Segment(6, 3, 4)]

    labels = trichar_frame_labels(segments, ["ab"], silence_id=0)

    assert labels == [None, ("#", "a", "b"), ("#", "a", "b"), ("a", "b", "#")]


def test_den_graph_round_trip():
    """write -> read -> write reproduces the file byte for byte."""
    inv = finalize_inventory(mono("a", "b", silence=True), "chain")
    lm = estimate_ngram([["char:a", "<sil>", "char:b"]], order=2)
    den = build_den_hmm(lm, CHAIN, inv)

    text = write_graph(den)
    again = read_graph(text)

    assert isinstance(again, DenGraph)
    assert write_graph(again) == text
    assert again.hashes == den.hashes
    assert text.startswith("# kind=den\n")


def test_num_graph_round_trip():
    """Numerator files keep their utterance id and constraint flag."""
    inv, _ = chenone_setup("hmm1")
    segments = [Segment(0, 0, 1), Segment(1, 1, 3), Segment(2, 3, 4)]
    num = build_num("u3", ["ab"], chenone_config("hmm1", 1.0), inv, segments=segments)

    again = read_graph(write_graph(num))

    assert isinstance(again, NumGraph)
    assert (again.utt_id, again.constrained) == ("u3", True)
    assert write_graph(again) == write_graph(num)


def test_read_graph_rejects_unknown_kind():
    """Files without a known kind header are refused."""
    with pytest.raises(GraphBuildError, match="unknown kind"):
        read_graph("0\t1\t1\t1\t0.000000\n1\t0.000000\n")


def test_check_den_inventory_detects_mismatch():
    """A denominator is tied to the inventory hash it was built with."""
    inv = finalize_inventory(mono("a", "b"), "hmm1")
    other = finalize_inventory(mono("a", "c"), "hmm1")
    lm = NgramLm(1, ("char:a", "char:b"), {(): {"char:a": -0.3, "char:b": -0.3}})
    den = build_den_hmm(lm, HMM1, inv)

    check_den_inventory(den, inv)
    with pytest.raises(GraphBuildError, match="hash"):
        check_den_inventory(den, other)
