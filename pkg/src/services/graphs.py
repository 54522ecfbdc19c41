"""
Denominator and numerator graph construction.

Denominators compose topology, context dependency and a token LM
(H o C o G), keep the input tape, remove epsilons in the log semiring and
trim. Character LMs of bi-char and chenone systems run over ``<sil>``, the
characters and the word-boundary token ``#``; the context transducer turns
those into unit labels. Mono-char and wordpiece LMs run over unit
descriptors, so no context transducer is needed.

CTC denominators for chenones are built with the chain HMM, whose
second-version loops mark label continuations, and then split into label
and blank states. Numerators are dispatched per
unit-type x topology cell.
"""

import hashlib
import math
from dataclasses import dataclass, field
from itertools import groupby
from typing import Mapping, Optional, Sequence, Union

from core.config import PipelineConfig
from core.errors import HybridAmError
from core.logging import get_logger
from services.token_lm import (
    SILENCE_TOKEN,
    WORD_BOUNDARY_TOKEN,
    NgramLm,
    char_alphabet,
    char_tokens_from_alignment,
    insert_silence,
    lm_to_fst,
    write_arpa,
)
from services.topology import (
    Segment,
    TimeConstraint,
    TopologyError,
    TopologySpec,
    apply_time_constraints,
    numerator_fst,
    topology_fst,
)
from services.units import (
    WORD_EDGE,
    WORD_MARKER,
    ChenoneTree,
    TriChar,
    Unit,
    UnitInventory,
    UnitKind,
    UnitsError,
    base_inventory,
    bichar_unit,
    finalize_inventory,
    word_trichars,
    word_units,
)
from services.wfst import (
    EPSILON,
    Fst,
    WfstError,
    compose,
    label_unit,
    project,
    rmepsilon,
    trim,
    unit_label,
)

logger = get_logger(__name__)

CHAIN = TopologySpec("chain")


class GraphBuildError(HybridAmError):
    """Raised when a denominator or numerator graph cannot be built."""

    pass


@dataclass
class DenGraph:
    """Shared all-hypotheses acceptor over output units."""

    fst: Fst
    unit_type: str
    topology: str
    lm_order: int
    hashes: dict[str, str] = field(default_factory=dict)

    def metadata(self) -> dict[str, str]:
        meta = {
            "kind": "den",
            "unit_type": self.unit_type,
            "topology": self.topology,
            "lm_order": str(self.lm_order),
            # silence resets the tri-char context
            "silence_context": "independent",
        }
        meta.update({f"{k}_hash": v for k, v in sorted(self.hashes.items())})
        return meta


@dataclass
class NumGraph:
    """Per-utterance reference graph (units in, labels out)."""

    fst: Fst
    utt_id: str
    topology: str
    constrained: bool = False

    def metadata(self) -> dict[str, str]:
        return {
            "kind": "num",
            "utt_id": self.utt_id,
            "topology": self.topology,
            "constrained": str(self.constrained).lower(),
        }


def lm_hash(lm: NgramLm) -> str:
    return hashlib.sha256(write_arpa(lm).encode("utf-8")).hexdigest()[:16]


def tree_hash(tree: ChenoneTree) -> str:
    return hashlib.sha256(tree.to_tsv().encode("utf-8")).hexdigest()[:16]


# ----------------------------------------------------------------------
# LM token alphabets and training text
# ----------------------------------------------------------------------


def uses_char_lm(unit_type: str) -> bool:
    return unit_type in ("bi-char", "chenone")


def lm_symbols(
    inv: UnitInventory, tree: Optional[ChenoneTree] = None
) -> tuple[dict[str, int], str]:
    """Token -> id map of the denominator LM and its alphabet name."""
    if inv.unit_type == "chenone":
        if tree is None:
            raise GraphBuildError("chenone systems need the decision tree")
        return char_alphabet(tree.chars), "chars"
    if inv.unit_type == "bi-char":
        return char_alphabet(inv.chars()), "chars"
    return {inv.units[i].descriptor: i for i in inv.base_ids}, "labels"


def den_lm_sequences(
    transcripts: Sequence[Sequence[str]],
    inv: UnitInventory,
    p_sil: float,
    seed: int,
    tree: Optional[ChenoneTree] = None,
) -> list[list[str]]:
    """
    Token sequences the denominator LM is estimated on.

    Silence is inserted at random word boundaries with probability
    ``p_sil``; character LMs additionally mark silence-free gaps with ``#``.
    """
    if uses_char_lm(inv.unit_type):
        split = [[list(word) for word in words] for words in transcripts]
        return insert_silence(split, p_sil, seed, boundary=WORD_BOUNDARY_TOKEN)
    try:
        split = [
            [
                [inv.units[u].descriptor for u in word_units(word, inv, tree)]
                for word in words
            ]
            for words in transcripts
        ]
    except UnitsError as e:
        raise GraphBuildError(f"cannot build LM text: {e}") from e
    if inv.silence_id is None:
        p_sil = 0.0
    return insert_silence(split, p_sil, seed)


def aligned_lm_sequences(
    transcripts: Mapping[str, Sequence[str]],
    alignments: Mapping[str, Sequence[Segment]],
    silence_id: int,
) -> list[list[str]]:
    """Character-LM text with silence taken from alignments, in utterance-id order."""
    missing = sorted(set(transcripts) - set(alignments))
    if missing:
        raise GraphBuildError(f"no alignment for utterance '{missing[0]}'")
    return [
        char_tokens_from_alignment(
            [tuple(s) for s in alignments[utt_id]], transcripts[utt_id], silence_id
        )
        for utt_id in sorted(transcripts)
    ]


# ----------------------------------------------------------------------
# Context dependency
# ----------------------------------------------------------------------


def context_fst_bichar(inv: UnitInventory, symbols: Mapping[str, int]) -> Fst:
    """
    Bi-char labels to character-LM tokens.

    State 0 is a word boundary (start, after silence or ``#``); state
    ``1 + k`` follows the k-th character inside a word. ``#`` is only read
    after a character, so boundaries never repeat.
    """
    chars = inv.chars()
    fst = Fst(input_alphabet="labels", output_alphabet="chars")
    boundary = fst.add_state()
    fst.set_start(boundary)
    fst.set_final(boundary, 0.0)
    inside = {c: fst.add_state() for c in chars}
    for state in inside.values():
        fst.set_final(state, 0.0)

    silence = inv.silence_id
    sil_token = unit_label(symbols[SILENCE_TOKEN])
    edge_token = unit_label(symbols[WORD_BOUNDARY_TOKEN])
    for left, src in [(None, boundary), *inside.items()]:
        for char in chars:
            unit = bichar_unit(inv, left, char)
            fst.add_arc(
                src, inside[char], unit_label(unit), unit_label(symbols[char]), 0.0
            )
        if silence is not None:
            fst.add_arc(src, boundary, unit_label(silence), sil_token, 0.0)
        if left is not None:
            fst.add_arc(src, boundary, EPSILON, edge_token, 0.0)
    return fst


def context_fst_tree(
    tree: ChenoneTree, inv: UnitInventory, symbols: Mapping[str, int]
) -> Fst:
    """
    Chenone labels to character-LM tokens, one character of lookahead.

    A pending state (l, c) has read character c but not yet its unit; the
    next token fixes the right context and the unit for (l, c, r) is read
    while that token is written.
    """
    chars = tree.chars
    fst = Fst(input_alphabet="labels", output_alphabet="chars")
    boundary = fst.add_state()
    fst.set_start(boundary)
    fst.set_final(boundary, 0.0)
    ended = fst.add_state()
    fst.set_final(ended, 0.0)
    before_silence = fst.add_state()

    def leaf_label(left: str, center: str, right: str) -> int:
        unit = inv.id_of(Unit(UnitKind.CHENONE, index=tree.leaf(left, center, right)))
        return unit_label(unit)

    pending: dict[tuple[str, str], int] = {}
    for left in (WORD_EDGE, *chars):
        for center in chars:
            pending[(left, center)] = fst.add_state()

    silence = inv.silence_id
    sil_token = unit_label(symbols[SILENCE_TOKEN])
    edge_token = unit_label(symbols[WORD_BOUNDARY_TOKEN])
    if silence is not None:
        fst.add_arc(boundary, boundary, unit_label(silence), sil_token, 0.0)
        fst.add_arc(before_silence, boundary, unit_label(silence), EPSILON, 0.0)
    for center in chars:
        fst.add_arc(
            boundary,
            pending[(WORD_EDGE, center)],
            EPSILON,
            unit_label(symbols[center]),
            0.0,
        )
    for (left, center), src in pending.items():
        for right in chars:
            fst.add_arc(
                src,
                pending[(center, right)],
                leaf_label(left, center, right),
                unit_label(symbols[right]),
                0.0,
            )
        last = leaf_label(left, center, WORD_EDGE)
        fst.add_arc(src, boundary, last, edge_token, 0.0)
        fst.add_arc(src, ended, last, EPSILON, 0.0)
        if silence is not None:
            fst.add_arc(src, before_silence, last, sil_token, 0.0)
    return trim(fst)


# ----------------------------------------------------------------------
# Denominators
# ----------------------------------------------------------------------


def _finish(fst: Fst, what: str) -> Fst:
    if fst.is_empty():
        raise GraphBuildError(f"{what}: composition is empty")
    try:
        prepared = trim(rmepsilon(project(fst, "input"), "log"))
    except WfstError as e:
        raise GraphBuildError(f"{what}: {e}") from e
    if prepared.is_empty():
        raise GraphBuildError(f"{what}: no path survives epsilon removal")
    logger.info(
        "graph prepared",
        extra={
            "extra_fields": {
                "graph": what,
                "states": prepared.num_states,
                "arcs": prepared.num_arcs,
            }
        },
    )
    return prepared


def build_den_hmm(
    lm: NgramLm,
    spec: TopologySpec,
    inv: UnitInventory,
    tree: Optional[ChenoneTree] = None,
) -> DenGraph:
    """
    H o C o G denominator for HMM topologies.

    The context transducer follows the inventory: bi-char map for bi-char,
    the decision tree for chenones, none for mono-char and wordpiece.
    """
    if spec.is_ctc:
        raise GraphBuildError("build_den_hmm needs an HMM topology")
    symbols, alphabet = lm_symbols(inv, tree)
    try:
        grammar = lm_to_fst(lm, symbols, alphabet)
        topology = topology_fst(spec, inv)
    except (HybridAmError, KeyError) as e:
        raise GraphBuildError(f"denominator for {inv.unit_type}: {e}") from e
    if inv.unit_type == "bi-char":
        topology = compose(topology, context_fst_bichar(inv, symbols))
    elif inv.unit_type == "chenone":
        assert tree is not None
        topology = compose(topology, context_fst_tree(tree, inv, symbols))
    logger.debug(
        "denominator parts",
        extra={
            "extra_fields": {
                "topology_states": topology.num_states,
                "lm_states": grammar.num_states,
            }
        },
    )
    name = f"{inv.unit_type}-{spec.kind} denominator"
    fst = _finish(compose(topology, grammar), name)
    hashes = {"lm": lm_hash(lm), "inventory": inv.content_hash()}
    if tree is not None:
        hashes["tree"] = tree_hash(tree)
    return DenGraph(fst, inv.unit_type, spec.kind, lm.order, hashes)


def _current_labels(fst: Fst, loops: UnitInventory) -> dict[int, int]:
    """Base unit of the label each state sits in (the start state has none)."""
    current: dict[int, int] = {}
    for arc in fst.iter_arcs():
        base = loops.base_of(label_unit(arc.ilabel))
        seen = current.setdefault(arc.dst, base)
        if seen != base:
            raise GraphBuildError(
                f"state {arc.dst} is entered by units of labels {seen} and {base}; "
                "expected a chain HMM graph"
            )
    return current


def split_blank_states(fst: Fst, loops: UnitInventory, blank_id: int) -> Fst:
    """
    Turn a chain-HMM graph into its CTC counterpart.

    ``loops`` is the chain inventory the graph was built over; its second
    versions mark the arcs that continue a label. Every state s gets a twin
    s' reached by Blank, with a Blank self-loop. Continuations stay on s
    (relabelled with their base unit); entries into the label s sits in
    leave from s' only; all other entries leave from both. Output labels
    are copied, so decoding transducers split the same way.
    """
    if fst.is_empty():
        raise GraphBuildError("cannot split an empty graph")
    assert fst.start is not None
    if loops.topology != "chain":
        raise GraphBuildError("blank splitting needs the chain inventory of the graph")
    blank = unit_label(blank_id)
    blank_out = blank if fst.is_acceptor() else EPSILON
    current = _current_labels(fst, loops)
    n = fst.num_states
    result = Fst(fst.input_alphabet, fst.output_alphabet)
    result.add_states(2 * n)
    result.set_start(fst.start)
    for state in range(n):
        twin = n + state
        result.add_arc(state, twin, blank, blank_out, 0.0)
        result.add_arc(twin, twin, blank, blank_out, 0.0)
        if fst.is_final(state):
            result.set_final(state, fst.final_weight(state))
            result.set_final(twin, fst.final_weight(state))
        for arc in fst.arcs(state):
            unit = label_unit(arc.ilabel)
            base = loops.base_of(unit)
            if base != unit:
                label = unit_label(base)
                olabel = label if blank_out == blank else arc.olabel
                result.add_arc(state, arc.dst, label, olabel, arc.weight)
                continue
            if base != current.get(state):
                result.add_arc(state, arc.dst, arc.ilabel, arc.olabel, arc.weight)
            result.add_arc(twin, arc.dst, arc.ilabel, arc.olabel, arc.weight)
    return trim(result)


def chain_view(inv: UnitInventory) -> UnitInventory:
    """Chain inventory over the same base units (ids unchanged)."""
    return finalize_inventory(base_inventory(inv), "chain")


def hmm_den_to_ctc_den(den: DenGraph, inv: UnitInventory) -> DenGraph:
    """
    Split every state of an HMM denominator into label and blank states.

    The input is the chain-topology denominator over ``chain_view(inv)``;
    an HMM1 denominator is rejected. The result accepts the CTC
    realisations of the same label sequences with the same weights as
    composing the CTC topology directly.
    """
    if den.topology == "hmm1":
        raise GraphBuildError(
            "cannot split an HMM1 denominator: its self-loops repeat the label unit, "
            "so continuations and re-entries look alike; build the chain "
            "denominator over chain_view(inv) instead"
        )
    if den.topology != "chain":
        raise GraphBuildError(f"expected a chain HMM denominator, got {den.topology}")
    if inv.blank_id is None:
        raise GraphBuildError("inventory lacks a Blank unit")
    fst = split_blank_states(den.fst, chain_view(inv), inv.blank_id)
    logger.info(
        "denominator split for CTC",
        extra={
            "extra_fields": {
                "states_in": den.fst.num_states,
                "states": fst.num_states,
            }
        },
    )
    hashes = dict(den.hashes, inventory=inv.content_hash())
    return DenGraph(fst, den.unit_type, "ctc", den.lm_order, hashes)


def build_den_ctc_wordpiece(lm: NgramLm, inv: UnitInventory) -> DenGraph:
    """Wordpiece LM composed with the CTC topology."""
    spec = TopologySpec("ctc")
    if inv.blank_id is None:
        raise GraphBuildError("wordpiece CTC needs a Blank unit")
    if inv.silence_id is not None:
        raise GraphBuildError("wordpiece CTC inventories carry no Silence unit")
    symbols, alphabet = lm_symbols(inv)
    try:
        grammar = lm_to_fst(lm, symbols, alphabet)
    except HybridAmError as e:
        raise GraphBuildError(f"wordpiece CTC denominator: {e}") from e
    fst = _finish(compose(topology_fst(spec, inv), grammar), "wp-ctc denominator")
    hashes = {"lm": lm_hash(lm), "inventory": inv.content_hash()}
    return DenGraph(fst, inv.unit_type, "ctc", lm.order, hashes)


def build_den(
    lm: NgramLm,
    config: PipelineConfig,
    inv: UnitInventory,
    tree: Optional[ChenoneTree] = None,
) -> DenGraph:
    """Denominator recipe of the configured cell."""
    if config.cell == "wp-ctc":
        return build_den_ctc_wordpiece(lm, inv)
    if config.is_ctc:
        chain = build_den_hmm(lm, CHAIN, chain_view(inv), tree)
        return hmm_den_to_ctc_den(chain, inv)
    return build_den_hmm(lm, TopologySpec(config.topology), inv, tree)


# ----------------------------------------------------------------------
# Numerators
# ----------------------------------------------------------------------


def _pair_segments(
    segments: Sequence[Segment], words: Sequence[str], silence_id: int
) -> list[Optional[TriChar]]:
    trichars = [t for word in words for t in word_trichars(word)]
    paired: list[Optional[TriChar]] = []
    consumed = 0
    for segment in segments:
        if segment.unit == silence_id:
            paired.append(None)
            continue
        if consumed >= len(trichars):
            raise GraphBuildError(
                "alignment has more non-silence segments than characters"
            )
        paired.append(trichars[consumed])
        consumed += 1
    if consumed != len(trichars):
        raise GraphBuildError(
            f"alignment covers {consumed} characters, transcript has {len(trichars)}"
        )
    return paired


def chenone_segments(
    segments: Sequence[Segment],
    words: Sequence[str],
    tree: ChenoneTree,
    inv: UnitInventory,
    silence_id: int,
) -> list[Segment]:
    """
    Relabel a bi-char alignment with chenones.

    Non-silence segments pair with the transcript characters in order;
    ``silence_id`` is the silence unit of the aligning inventory.
    """
    result = []
    for segment, trichar in zip(segments, _pair_segments(segments, words, silence_id)):
        if trichar is None:
            if inv.silence_id is None:
                raise GraphBuildError("chenone inventory has no Silence unit")
            unit = inv.silence_id
        else:
            unit = inv.id_of(Unit(UnitKind.CHENONE, index=tree.leaf(*trichar)))
        result.append(Segment(unit, segment.start, segment.end))
    return result


def trichar_frame_labels(
    segments: Sequence[Segment], words: Sequence[str], silence_id: int
) -> list[Optional[TriChar]]:
    """Per-frame tri-char labels for tree statistics; silence frames are None."""
    labels: list[Optional[TriChar]] = []
    for segment, trichar in zip(segments, _pair_segments(segments, words, silence_id)):
        labels.extend([trichar] * (segment.end - segment.start))
    return labels


def _unit_spans(
    words: Sequence[str], inv: UnitInventory, tree: Optional[ChenoneTree]
) -> list[tuple[int, int]]:
    """(unit, characters covered) along the transcript."""
    spans: list[tuple[int, int]] = []
    for word in words:
        for unit in word_units(word, inv, tree):
            symbol = inv.units[unit].symbol
            if inv.unit_type == "wordpiece" and symbol:
                spans.append((unit, len(symbol.replace(WORD_MARKER, ""))))
            else:
                spans.append((unit, 1))
    return spans


def system_segments(
    segments: Sequence[Segment],
    words: Sequence[str],
    inv: UnitInventory,
    silence_id: int,
    tree: Optional[ChenoneTree] = None,
) -> list[Segment]:
    """
    Relabel a character-level alignment with the units of ``inv``.

    Non-silence segments pair with the transcript characters in order; a
    wordpiece spans the segments of all its characters. Silence becomes the
    Silence unit of ``inv``, or Blank for inventories without one.

    Raises:
        GraphBuildError: If the alignment and the transcript disagree on the
            number of characters, or a word cannot be spelled with ``inv``.
    """
    pause = inv.silence_id if inv.silence_id is not None else inv.blank_id
    try:
        spans = _unit_spans(words, inv, tree)
    except UnitsError as e:
        raise GraphBuildError(str(e)) from e
    chars = sum(count for _, count in spans)
    speech = sum(1 for s in segments if s.unit != silence_id)
    if speech != chars:
        raise GraphBuildError(
            f"alignment covers {speech} characters, transcript has {chars}"
        )
    result: list[Segment] = []
    pending = iter(spans)
    unit, left, start = -1, 0, 0
    for segment in segments:
        if segment.unit == silence_id:
            if left:
                raise GraphBuildError(f"silence inside unit {unit}")
            if pause is None:
                raise GraphBuildError("inventory has neither Silence nor Blank")
            result.append(Segment(pause, segment.start, segment.end))
            continue
        if not left:
            unit, left = next(pending)
            start = segment.start
        left -= 1
        if not left:
            result.append(Segment(unit, start, segment.end))
    return result


def transcript_labels(
    words: Sequence[str], inv: UnitInventory, tree: Optional[ChenoneTree] = None
) -> tuple[list[int], list[int]]:
    """Concatenated word units and the word-boundary label positions."""
    labels: list[int] = []
    boundaries = [0]
    for word in words:
        labels.extend(word_units(word, inv, tree))
        boundaries.append(len(labels))
    return labels, boundaries


def build_num(
    utt_id: str,
    words: Sequence[str],
    config: PipelineConfig,
    inv: UnitInventory,
    tree: Optional[ChenoneTree] = None,
    segments: Optional[Sequence[Segment]] = None,
) -> NumGraph:
    """
    Numerator of one utterance for the configured cell.

    Chenone systems read their labels from ``segments`` (already relabelled
    with chenones): ch-HMM keeps every segment and applies time constraints,
    ch-CTC removes repetitions and is unconstrained. The other cells expand
    the transcript through the lexicon rule of their unit type.

    Raises:
        GraphBuildError: On an untokenizable word, a missing chenone
            alignment or a numerator without paths.
    """
    spec = TopologySpec(config.topology)
    constrained = False
    try:
        if config.unit_type == "chenone":
            if not segments:
                raise GraphBuildError(
                    f"utterance {utt_id}: chenone numerators need an alignment"
                )
            if config.is_ctc:
                labels = [unit for unit, _ in groupby(s.unit for s in segments)]
                fst = numerator_fst(labels, spec, inv)
            else:
                fst = numerator_fst([s.unit for s in segments], spec, inv)
                if config.time_constrained and math.isfinite(config.tolerance):
                    constraint = TimeConstraint(tuple(segments), config.tolerance)
                    fst = apply_time_constraints(fst, constraint, inv)
                    constrained = True
        else:
            labels, boundaries = transcript_labels(words, inv, tree)
            fst = numerator_fst(
                labels,
                spec,
                inv,
                allow_silence=config.allow_silence,
                boundaries=boundaries,
            )
    except (UnitsError, TopologyError) as e:
        raise GraphBuildError(f"utterance {utt_id}: {e}") from e
    if fst.is_empty():
        raise GraphBuildError(f"utterance {utt_id}: numerator is empty")
    return NumGraph(fst, utt_id, config.topology, constrained)


# ----------------------------------------------------------------------
# Serialization
# ----------------------------------------------------------------------

GraphFile = Union[DenGraph, NumGraph]


def write_graph(graph: GraphFile) -> str:
    """Text FST preceded by ``# key=value`` metadata lines."""
    header = "".join(f"# {k}={v}\n" for k, v in graph.metadata().items())
    return header + graph.fst.to_text()


def read_header(text: str) -> dict[str, str]:
    """The leading ``# key=value`` lines of an artifact."""
    meta: dict[str, str] = {}
    for line in text.splitlines():
        if not line.startswith("#"):
            break
        key, sep, value = line[1:].strip().partition("=")
        if sep:
            meta[key.strip()] = value.strip()
    return meta


def read_graph(text: str) -> GraphFile:
    meta = read_header(text)
    kind = meta.get("kind")
    if kind == "den":
        fst = Fst.from_text(text, "units", "units")
        hashes = {k[: -len("_hash")]: v for k, v in meta.items() if k.endswith("_hash")}
        try:
            return DenGraph(
                fst, meta["unit_type"], meta["topology"], int(meta["lm_order"]), hashes
            )
        except (KeyError, ValueError) as e:
            raise GraphBuildError(f"malformed denominator header: {e}") from e
    if kind == "num":
        fst = Fst.from_text(text, "units", "labels")
        try:
            return NumGraph(
                fst, meta["utt_id"], meta["topology"], meta.get("constrained") == "true"
            )
        except KeyError as e:
            raise GraphBuildError(f"malformed numerator header: missing {e}") from e
    raise GraphBuildError(f"graph file has unknown kind '{kind}'")


def check_den_inventory(den: DenGraph, inv: UnitInventory) -> None:
    """Refuse a denominator built for another inventory."""
    expected = den.hashes.get("inventory")
    if expected is not None and expected != inv.content_hash():
        raise GraphBuildError(
            f"denominator inventory hash {expected} does not match {inv.content_hash()}"
        )
    bad = [label for label in den.fst.input_symbols() if label_unit(label) >= inv.size]
    if bad:
        raise GraphBuildError(f"denominator label {bad[0]} is outside the inventory")
