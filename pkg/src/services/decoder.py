"""
Decoding, forced alignment and scoring.

Decode graphs compose the topology with the lexicon and a word LM
(H o L o G) and remove epsilons in the tropical semiring. CTC graphs are
built over the chain HMM and split into label and blank states exactly like
CTC denominators. Search is a frame-synchronous Viterbi pass over arc arrays
with an optional score beam.
"""

import hashlib
import math
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from core.config import PipelineConfig
from core.errors import HybridAmError
from core.logging import get_logger
from services.graphs import (
    CHAIN,
    NumGraph,
    chain_view,
    lm_hash,
    read_header,
    split_blank_states,
)
from services.loss import GraphArrays, LossConfig, adjust_scores
from services.token_lm import BOS, EOS, NgramLm, lm_to_fst
from services.topology import Segment, TopologySpec, topology_fst
from services.units import Lexicon, UnitInventory, build_lexicon_fst
from services.wfst import EPSILON, Fst, compose, label_unit, rmepsilon, trim

logger = get_logger(__name__)

_TIMED_WORD = re.compile(r"^(\S+)\[(\d+),(\d+)\]$")


class DecodeError(HybridAmError):
    """Raised when decoding, alignment or scoring fails."""

    pass


class InventoryMismatchError(DecodeError):
    """Raised when a graph was built for another unit inventory."""

    pass


@dataclass
class DecodeGraph:
    """Units-to-words transducer with its word table."""

    fst: Fst
    words: tuple[str, ...]
    unit_type: str
    topology: str
    silent_units: tuple[int, ...] = ()
    hashes: dict[str, str] = field(default_factory=dict)

    @cached_property
    def arrays(self) -> GraphArrays:
        return GraphArrays.from_fst(self.fst)

    def metadata(self) -> dict[str, str]:
        meta = {
            "kind": "decode",
            "unit_type": self.unit_type,
            "topology": self.topology,
            "words": " ".join(self.words),
            "silent_units": " ".join(str(u) for u in self.silent_units),
        }
        meta.update({f"{k}_hash": v for k, v in sorted(self.hashes.items())})
        return meta

    def check_inventory(self, inv: UnitInventory) -> None:
        """
        Refuse an acoustic model whose inventory differs from the graph's.

        Raises:
            InventoryMismatchError: On a hash mismatch or an out-of-range unit.
        """
        expected = self.hashes.get("inventory")
        if expected is not None and expected != inv.content_hash():
            raise InventoryMismatchError(
                f"decode graph inventory hash {expected} "
                f"does not match {inv.content_hash()}"
            )
        bad = [
            label
            for label in self.fst.input_symbols()
            if label_unit(label) >= inv.size
        ]
        if bad:
            raise InventoryMismatchError(
                f"decode graph unit {label_unit(bad[0])} is unknown"
            )


@dataclass(frozen=True)
class Hypothesis:
    words: tuple[str, ...]
    word_times: tuple[tuple[int, int], ...]
    score: float


@dataclass(frozen=True)
class Alignment:
    frames: tuple[int, ...]
    segments: tuple[Segment, ...]
    score: float


# ----------------------------------------------------------------------
# Graph construction
# ----------------------------------------------------------------------


def lexicon_hash(lex: Lexicon) -> str:
    return hashlib.sha256(lex.to_tsv().encode("utf-8")).hexdigest()[:16]


def lm_words(word_lm: NgramLm) -> list[str]:
    return sorted(w for w in word_lm.vocab if w not in (BOS, EOS))


def build_decode_graph(
    word_lm: NgramLm, lex: Lexicon, config: PipelineConfig, inv: UnitInventory
) -> DecodeGraph:
    """
    H o L o G for the configured cell.

    Raises:
        DecodeError: If LM words are missing from the lexicon or the graph
            comes out empty.
    """
    words = lm_words(word_lm)
    missing = [w for w in words if w not in lex.entries]
    if missing:
        raise DecodeError(f"words missing from the lexicon: {', '.join(missing)}")
    word_ids = {w: i for i, w in enumerate(words)}

    if config.is_ctc:
        if inv.blank_id is None:
            raise DecodeError("CTC decode graphs need a Blank unit")
        topology_inv = chain_view(inv)
        h = topology_fst(CHAIN, topology_inv)
    else:
        topology_inv = inv
        h = topology_fst(TopologySpec(config.topology), inv)
    with_silence = config.allow_silence and inv.silence_id is not None
    lexicon = build_lexicon_fst(lex, with_silence, inv.silence_id, word_ids)
    grammar = lm_to_fst(word_lm, word_ids, "words")

    fst = trim(rmepsilon(compose(compose(h, lexicon), grammar), "tropical"))
    if config.is_ctc and not fst.is_empty():
        assert inv.blank_id is not None
        fst = split_blank_states(fst, topology_inv, inv.blank_id)
    if fst.is_empty():
        raise DecodeError("decode graph is empty")
    logger.info(
        "decode graph built",
        extra={
            "extra_fields": {
                "cell": config.cell,
                "words": len(words),
                "states": fst.num_states,
                "arcs": fst.num_arcs,
            }
        },
    )
    silent = tuple(u for u in range(inv.size) if inv.is_silence_or_blank(u))
    hashes = {
        "inventory": inv.content_hash(),
        "lexicon": lexicon_hash(lex),
        "lm": lm_hash(word_lm),
    }
    return DecodeGraph(
        fst, tuple(words), inv.unit_type, config.topology, silent, hashes
    )


def write_decode_graph(graph: DecodeGraph) -> str:
    header = "".join(f"# {k}={v}\n" for k, v in graph.metadata().items())
    return header + graph.fst.to_text()


def read_decode_graph(text: str) -> DecodeGraph:
    meta = read_header(text)
    if meta.get("kind") != "decode":
        raise DecodeError(f"not a decode graph (kind '{meta.get('kind')}')")
    try:
        words = tuple(meta["words"].split())
        silent = tuple(int(u) for u in meta.get("silent_units", "").split())
        hashes = {k[: -len("_hash")]: v for k, v in meta.items() if k.endswith("_hash")}
        fst = Fst.from_text(text, "units", "words")
        return DecodeGraph(
            fst, words, meta["unit_type"], meta["topology"], silent, hashes
        )
    except (KeyError, ValueError) as e:
        raise DecodeError(f"malformed decode graph header: {e}") from e


# ----------------------------------------------------------------------
# Search
# ----------------------------------------------------------------------


def best_arc_path(
    arrays: GraphArrays, scores: np.ndarray, beam: float = math.inf
) -> tuple[float, list[int]]:
    """
    Tropical best path of exactly T arcs: its score and arc indices.

    After each frame, states scoring more than ``beam`` below the best are
    dropped. Ties go to the lowest arc index, then the lowest final state.

    Raises:
        DecodeError: If every path dies before the last frame.
    """
    frames = scores.shape[0]
    if not np.isfinite(scores).all():
        raise DecodeError("scores must be finite")
    emit = arrays.weights[None, :] + scores[:, arrays.units]
    best = np.full(arrays.num_states, -np.inf)
    best[arrays.start] = 0.0
    back = np.full((frames, arrays.num_states), -1, dtype=np.int64)
    for t in range(frames):
        candidates = best[arrays.src] + emit[t]
        live = np.flatnonzero(candidates > -np.inf)
        if live.size == 0:
            raise DecodeError(f"no active path at frame {t}")
        order = live[np.lexsort((-candidates[live], arrays.dst[live]))]
        targets = arrays.dst[order]
        first = np.ones(order.size, dtype=bool)
        first[1:] = targets[1:] != targets[:-1]
        winners = order[first]
        best = np.full(arrays.num_states, -np.inf)
        best[arrays.dst[winners]] = candidates[winners]
        back[t, arrays.dst[winners]] = winners
        if math.isfinite(beam):
            best[best < best.max() - beam] = -np.inf

    totals = best + arrays.finals
    state = int(np.argmax(totals))
    if totals[state] == -np.inf:
        raise DecodeError(f"no final state reached after {frames} frames")
    score = float(totals[state])
    path = [0] * frames
    for t in range(frames - 1, -1, -1):
        arc = int(back[t, state])
        path[t] = arc
        state = int(arrays.src[arc])
    return score, path


def _word_times(
    units: Sequence[int], starts: Sequence[int], silent: set[int]
) -> list[tuple[int, int]]:
    times = []
    for k, start in enumerate(starts):
        stop = starts[k + 1] if k + 1 < len(starts) else len(units)
        end = start + 1
        for t in range(start, stop):
            if units[t] not in silent:
                end = t + 1
        times.append((start, end))
    return times


def viterbi_decode(
    logits: np.ndarray, graph: DecodeGraph, cfg: LossConfig, beam: float = math.inf
) -> Hypothesis:
    """
    Best word sequence for one utterance.

    Scores go through the same ``adjust_scores`` as training. A word starts
    on the frame whose arc carries it and ends one past its last frame that
    is neither silence nor blank.
    """
    arrays = graph.arrays
    score, path = best_arc_path(arrays, adjust_scores(logits, cfg), beam)
    units = arrays.units[path].tolist()
    olabels = arrays.olabels[path].tolist()
    starts = [t for t, o in enumerate(olabels) if o != EPSILON]
    words = tuple(graph.words[label_unit(olabels[t])] for t in starts)
    times = _word_times(units, starts, set(graph.silent_units))
    return Hypothesis(words, tuple(times), score)


def force_align(
    logits: np.ndarray,
    num: Union[NumGraph, Fst],
    cfg: LossConfig,
    inv: UnitInventory,
) -> Alignment:
    """
    Best numerator path and the unit segments it implies.

    A segment starts where a label is entered; runs of Blank frames form
    their own segments. Second versions are reported as their base unit.
    Segments tile [0, T).

    Raises:
        DecodeError: If the numerator has no path of length T.
    """
    fst = num.fst if isinstance(num, NumGraph) else num
    arrays = GraphArrays.from_fst(fst)
    score, path = best_arc_path(arrays, adjust_scores(logits, cfg))
    frames = arrays.units[path].tolist()
    olabels = arrays.olabels[path].tolist()
    blank = inv.blank_id
    segments: list[Segment] = []
    start = 0
    for t in range(1, len(frames) + 1):
        if t < len(frames):
            enters = olabels[t] != EPSILON
            blank_edge = (frames[t] == blank) != (frames[t - 1] == blank)
            if not enters and not blank_edge:
                continue
        segments.append(Segment(inv.base_of(frames[start]), start, t))
        start = t
    return Alignment(tuple(frames), tuple(segments), score)


def decode_all(
    items: Sequence[tuple[str, np.ndarray]],
    graph: DecodeGraph,
    cfg: LossConfig,
    beam: float,
    seconds_per_frame: float,
    workers: int = 1,
) -> dict[str, Hypothesis]:
    """Decode (utt_id, logits) pairs; the real-time factor is logged per utterance."""

    def one(item: tuple[str, np.ndarray]) -> tuple[str, Hypothesis]:
        utt_id, logits = item
        began = time.perf_counter()
        hyp = viterbi_decode(logits, graph, cfg, beam)
        elapsed = time.perf_counter() - began
        audio = logits.shape[0] * seconds_per_frame
        logger.info(
            "utterance decoded",
            extra={
                "extra_fields": {
                    "utt_id": utt_id,
                    "words": len(hyp.words),
                    "rtf": round(elapsed / audio, 4) if audio > 0 else None,
                }
            },
        )
        return utt_id, hyp

    with ThreadPoolExecutor(max_workers=workers) as pool:
        return dict(pool.map(one, items))


# ----------------------------------------------------------------------
# Scoring
# ----------------------------------------------------------------------


def edit_alignment(
    ref: Sequence[str], hyp: Sequence[str]
) -> tuple[int, list[tuple[Optional[int], Optional[int]]]]:
    """
    Levenshtein distance and one optimal alignment.

    Pairs are (ref index, hyp index); ``None`` on one side marks an
    insertion or deletion. Matches and substitutions are preferred over
    deletions, deletions over insertions.
    """
    n, m = len(ref), len(hyp)
    cost = np.zeros((n + 1, m + 1), dtype=np.int64)
    cost[:, 0] = np.arange(n + 1)
    cost[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost[i, j] = min(
                cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                cost[i - 1, j] + 1,
                cost[i, j - 1] + 1,
            )
    pairs: list[tuple[Optional[int], Optional[int]]] = []
    i, j = n, m
    while i > 0 or j > 0:
        if (
            i > 0
            and j > 0
            and cost[i, j] == cost[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1])
        ):
            pairs.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        elif i > 0 and cost[i, j] == cost[i - 1, j] + 1:
            pairs.append((i - 1, None))
            i -= 1
        else:
            pairs.append((None, j - 1))
            j -= 1
    pairs.reverse()
    return int(cost[n, m]), pairs


def wer(refs: Mapping[str, Sequence[str]], hyps: Mapping[str, Sequence[str]]) -> float:
    """
    Word error rate over all utterances of ``refs``.

    Raises:
        DecodeError: If a hypothesis is missing or there are no reference words.
    """
    errors = 0
    total = 0
    for utt_id in sorted(refs):
        if utt_id not in hyps:
            raise DecodeError(f"no hypothesis for utterance '{utt_id}'")
        distance, _ = edit_alignment(refs[utt_id], hyps[utt_id])
        errors += distance
        total += len(refs[utt_id])
    if total == 0:
        raise DecodeError("references contain no words")
    return errors / total


def tse(
    ref_times: Mapping[str, Sequence[tuple[str, int, int]]],
    hyps: Mapping[str, Hypothesis],
    frame_ms: float,
    stride: int,
) -> Optional[float]:
    """
    Mean absolute start/end time-stamp error of correct words, in ms.

    Words are paired by the WER alignment; substitutions, insertions and
    deletions are ignored. Returns None when no word is correct.
    """
    total = 0
    stamps = 0
    for utt_id in sorted(ref_times):
        if utt_id not in hyps:
            raise DecodeError(f"no hypothesis for utterance '{utt_id}'")
        ref = ref_times[utt_id]
        hyp = hyps[utt_id]
        _, pairs = edit_alignment([w for w, _, _ in ref], hyp.words)
        for i, j in pairs:
            if i is None or j is None or ref[i][0] != hyp.words[j]:
                continue
            start, end = hyp.word_times[j]
            total += abs(ref[i][1] - start) + abs(ref[i][2] - end)
            stamps += 2
    if stamps == 0:
        return None
    return total / stamps * frame_ms * stride


# ----------------------------------------------------------------------
# Text formats
# ----------------------------------------------------------------------


def format_hypothesis(utt_id: str, hyp: Hypothesis) -> str:
    timed = " ".join(f"{w}[{s},{e}]" for w, (s, e) in zip(hyp.words, hyp.word_times))
    return f"{utt_id}\t{timed}\t{hyp.score:.6f}"


def write_hypotheses(hyps: Mapping[str, Hypothesis]) -> str:
    lines = [format_hypothesis(utt_id, hyps[utt_id]) for utt_id in sorted(hyps)]
    return "\n".join(lines) + ("\n" if lines else "")


def read_hypotheses(text: str) -> dict[str, Hypothesis]:
    """Parse ``utt_id<TAB>word[start,end] ...<TAB>score`` lines."""
    hyps: dict[str, Hypothesis] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise DecodeError(
                f"hypothesis line {number}: expected 3 tab-separated fields"
            )
        utt_id, timed, score = fields
        words: list[str] = []
        times: list[tuple[int, int]] = []
        for token in timed.split():
            match = _TIMED_WORD.match(token)
            if match is None:
                raise DecodeError(f"hypothesis line {number}: malformed word '{token}'")
            words.append(match.group(1))
            times.append((int(match.group(2)), int(match.group(3))))
        try:
            hyps[utt_id] = Hypothesis(tuple(words), tuple(times), float(score))
        except ValueError as e:
            raise DecodeError(f"hypothesis line {number}: bad score '{score}'") from e
    return hyps


def word_times_from_hypotheses(
    hyps: Mapping[str, Hypothesis]
) -> dict[str, list[tuple[str, int, int]]]:
    """Reference time-stamps stored in the hypothesis format."""
    return {
        utt_id: [(w, s, e) for w, (s, e) in zip(hyp.words, hyp.word_times)]
        for utt_id, hyp in hyps.items()
    }
