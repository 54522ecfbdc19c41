"""
N-gram token language models for denominator and decoding graphs.

Tokens are plain strings: unit descriptors for mono-char and wordpiece
systems, characters plus ``<sil>`` and the word-boundary token ``#`` for the
character LMs of bi-char and chenone systems, and words for decoding LMs.
Probabilities are stored as base-10 logs, the ARPA convention, so that
ARPA files round-trip bit-exactly; everything handed to an FST is natural
log.
"""

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from core.errors import HybridAmError
from core.logging import get_logger
from services.wfst import EPSILON, Arc, Fst, unit_label

logger = get_logger(__name__)

BOS = "<s>"
EOS = "</s>"
SILENCE_TOKEN = "<sil>"
WORD_BOUNDARY_TOKEN = "#"
LN10 = math.log(10.0)
# ARPA's conventional stand-in for log10(0)
ARPA_ZERO = -99.0

History = tuple[str, ...]


class LanguageModelError(HybridAmError):
    """Raised on invalid LM input, ARPA syntax or unmapped tokens."""

    pass


@dataclass
class NgramLm:
    """
    Backoff n-gram model.

    ``log10_probs[h][w]`` holds the explicit log10 P(w | h);
    ``log10_backoffs[h]`` the log10 backoff weight of context ``h`` (absent
    means 0, i.e. weight 1). ``counts`` keeps the raw counts of an estimated
    model and is not serialized.
    """

    order: int
    vocab: tuple[str, ...]
    log10_probs: dict[History, dict[str, float]]
    log10_backoffs: dict[History, float] = field(default_factory=dict)
    counts: dict[History, Counter[str]] = field(default_factory=dict, compare=False)

    @property
    def contexts(self) -> set[History]:
        return set(self.log10_probs)

    @property
    def has_sentence_end(self) -> bool:
        return any(EOS in probs for probs in self.log10_probs.values())

    def mle(self, token: str, history: Sequence[str] = ()) -> float:
        """
        Unsmoothed relative frequency of ``token`` after ``history``.

        Sentence ends count in the denominator only when asking for ``</s>``.
        """
        counts = self.counts.get(tuple(history))
        if not counts:
            return 0.0
        total = sum(n for w, n in counts.items() if w != EOS or token == EOS)
        return counts[token] / total if total else 0.0

    def backoff(self, history: History) -> float:
        """Natural-log backoff weight of a context."""
        return self.log10_backoffs.get(history, 0.0) * LN10

    def log_prob(self, token: str, history: Sequence[str]) -> float:
        """Natural-log P(token | history) following backoff semantics."""
        h = tuple(history)[-(self.order - 1) :] if self.order > 1 else ()
        total = 0.0
        while True:
            probs = self.log10_probs.get(h)
            if probs is not None and token in probs:
                return total + probs[token] * LN10
            if not h:
                return -math.inf
            if probs is not None:
                total += self.backoff(h)
                if total == -math.inf:
                    return total
            h = h[1:]

    def start_history(self) -> History:
        return (BOS,) if self.order > 1 else ()

    def score(self, tokens: Sequence[str]) -> float:
        """Direct table-lookup log probability of a whole sequence."""
        history: list[str] = list(self.start_history())
        total = 0.0
        for token in tokens:
            total += self.log_prob(token, history)
            history.append(token)
        if self.has_sentence_end:
            total += self.log_prob(EOS, history)
        return total


def _sentence_counts(
    sequences: Sequence[Sequence[str]], order: int
) -> dict[History, Counter[str]]:
    counts: dict[History, Counter[str]] = {}
    for sequence in sequences:
        padded = [BOS, *sequence, EOS]
        for i in range(1, len(padded)):
            for k in range(0, min(order - 1, i) + 1):
                history = tuple(padded[i - k : i])
                counts.setdefault(history, Counter())[padded[i]] += 1
    return counts


def estimate_ngram(
    sequences: Sequence[Sequence[str]],
    order: int,
    smoothing: str = "witten-bell",
    vocab: Optional[Iterable[str]] = None,
) -> NgramLm:
    """
    Witten-Bell smoothed backoff n-gram model.

    The unigram level interpolates with a uniform distribution over the
    vocabulary plus ``</s>``; higher orders interpolate with the next lower
    order. Contexts whose continuations were all seen get a zero backoff
    weight.

    Raises:
        LanguageModelError: On empty input, an order below 1 or an unknown
            smoothing method.
    """
    if order < 1:
        raise LanguageModelError(f"order must be >= 1, got {order}")
    if smoothing != "witten-bell":
        raise LanguageModelError(f"unsupported smoothing '{smoothing}'")
    if not sequences:
        raise LanguageModelError("cannot estimate an LM from no sequences")

    counts = _sentence_counts(sequences, order)
    seen = {w for c in counts.values() for w in c} - {EOS}
    tokens = sorted(seen | set(vocab or ()))
    outcomes = [*tokens, EOS]
    index = {w: i for i, w in enumerate(outcomes)}

    # full interpolated distributions, linear domain
    full: dict[History, np.ndarray] = {}
    log10_probs: dict[History, dict[str, float]] = {}
    log10_backoffs: dict[History, float] = {}
    for history in sorted(counts, key=lambda h: (len(h), h)):
        c = counts[history]
        total = sum(c.values())
        distinct = len(c)
        lam = total / (total + distinct)
        if history:
            lower = full[history[1:]]
        else:
            lower = np.full(len(outcomes), 1.0 / len(outcomes))
        dist = (1.0 - lam) * lower
        for w, n in c.items():
            dist[index[w]] += lam * n / total
        full[history] = dist

        seen_ids = [index[w] for w in c]
        # the unigram level lists every outcome, higher orders only seen ones
        explicit = outcomes if not history else sorted(c)
        log10_probs[history] = {w: math.log10(dist[index[w]]) for w in explicit}
        if history:
            left = 1.0 - float(dist[seen_ids].sum())
            right = 1.0 - float(lower[seen_ids].sum())
            if left <= 1e-15 or right <= 1e-15:
                log10_backoffs[history] = -math.inf
            else:
                log10_backoffs[history] = math.log10(left / right)

    lm = NgramLm(order, tuple(tokens), log10_probs, log10_backoffs, counts)
    logger.info(
        "n-gram LM estimated",
        extra={
            "extra_fields": {
                "order": order,
                "vocab": len(tokens),
                "contexts": len(log10_probs),
            }
        },
    )
    return lm


# ----------------------------------------------------------------------
# Silence handling for denominator LM text
# ----------------------------------------------------------------------


def insert_silence(
    utterances: Sequence[Sequence[Sequence[str]]],
    p_sil: float,
    seed: int,
    silence: str = SILENCE_TOKEN,
    boundary: Optional[str] = None,
) -> list[list[str]]:
    """
    Flatten word-split token sequences, inserting silence at word boundaries.

    Boundaries are the utterance start, every gap between words and the
    utterance end; each gets silence independently with probability
    ``p_sil`` drawn from one seeded generator in corpus order. When
    ``boundary`` is set it marks every between-word gap that did not get
    silence.
    """
    if not 0.0 <= p_sil < 1.0:
        raise LanguageModelError(f"p_sil must lie in [0, 1), got {p_sil}")
    rng = np.random.default_rng(seed)
    result: list[list[str]] = []
    for words in utterances:
        draws = rng.random(len(words) + 1) < p_sil
        tokens: list[str] = []
        for position, word in enumerate(words):
            if draws[position]:
                tokens.append(silence)
            elif position > 0 and boundary is not None:
                tokens.append(boundary)
            tokens.extend(word)
        if draws[len(words)]:
            tokens.append(silence)
        result.append(tokens)
    return result


def char_tokens_from_alignment(
    segments: Sequence[tuple[int, int, int]],
    words: Sequence[str],
    silence_id: int,
    boundary: str = WORD_BOUNDARY_TOKEN,
) -> list[str]:
    """
    Character-LM tokens with silence placed where an alignment put it.

    Non-silence segments pair with the transcript characters in order; a
    word boundary not covered by a silence segment becomes ``boundary``.
    """
    chars = [
        (c, position == len(word) - 1)
        for word in words
        for position, c in enumerate(word)
    ]
    tokens: list[str] = []
    consumed = 0
    for i, (unit, _, _) in enumerate(segments):
        if unit == silence_id:
            tokens.append(SILENCE_TOKEN)
            continue
        if consumed >= len(chars):
            raise LanguageModelError(
                "alignment has more non-silence segments than characters"
            )
        char, ends_word = chars[consumed]
        tokens.append(char)
        consumed += 1
        next_is_silence = i + 1 < len(segments) and segments[i + 1][0] == silence_id
        if ends_word and consumed < len(chars) and not next_is_silence:
            tokens.append(boundary)
    if consumed != len(chars):
        raise LanguageModelError(
            f"alignment covers {consumed} characters, transcript has {len(chars)}"
        )
    return tokens


def char_alphabet(chars: Iterable[str]) -> dict[str, int]:
    """Token ids of a character LM: ``<sil>``, the characters, then ``#``."""
    symbols = [SILENCE_TOKEN, *sorted(set(chars)), WORD_BOUNDARY_TOKEN]
    return {token: i for i, token in enumerate(symbols)}


# ----------------------------------------------------------------------
# FST rendering
# ----------------------------------------------------------------------


def _next_context(lm: NgramLm, history: History, token: str) -> History:
    extended = (history + (token,))[-(lm.order - 1) :] if lm.order > 1 else ()
    while extended not in lm.log10_probs and extended:
        extended = extended[1:]
    return extended


def lm_to_fst(
    lm: NgramLm,
    symbols: Mapping[str, int],
    alphabet: Optional[str] = None,
) -> Fst:
    """
    Backoff acceptor: one state per context, epsilon arcs for backoff.

    Token ``w`` travels as label ``symbols[w] + 1``. ``</s>`` probabilities
    become final weights; a model without any sentence-end probability makes
    every state final with weight 0.

    Raises:
        LanguageModelError: If a token has no entry in ``symbols``.
    """
    fst = Fst(alphabet, alphabet)
    contexts = sorted(lm.log10_probs, key=lambda h: (len(h), h))
    if () not in lm.log10_probs:
        contexts.insert(0, ())
    state_of = {h: fst.add_state() for h in contexts}
    start = lm.start_history() if lm.start_history() in state_of else ()
    fst.set_start(state_of[start])
    sentence_end = lm.has_sentence_end

    for history in contexts:
        src = state_of[history]
        probs = lm.log10_probs.get(history, {})
        for token, log10_p in probs.items():
            if token == EOS:
                fst.set_final(src, log10_p * LN10)
                continue
            if token not in symbols:
                raise LanguageModelError(
                    f"token '{token}' has no label in the symbol table"
                )
            weight = log10_p * LN10
            if not math.isfinite(weight):
                continue
            dst = state_of[_next_context(lm, history, token)]
            label = unit_label(symbols[token])
            fst.add_arc(src, dst, label, label, weight)
        if history:
            backoff = lm.backoff(history)
            if math.isfinite(backoff):
                fst.add_arc(src, state_of[history[1:]], EPSILON, EPSILON, backoff)
        if not sentence_end:
            fst.set_final(src, 0.0)
    return fst


def backoff_score(fst: Fst, tokens: Sequence[str], symbols: Mapping[str, int]) -> float:
    """
    Score a sequence by walking an ``lm_to_fst`` acceptor deterministically.

    The epsilon backoff arc is followed only when the state has no arc for
    the next token, which reproduces ``NgramLm.score``.
    """
    if fst.start is None:
        return -math.inf
    state = fst.start
    total = 0.0

    def backoff_arc(s: int) -> Optional[Arc]:
        return next((a for a in fst.arcs(s) if a.ilabel == EPSILON), None)

    for token in tokens:
        label = unit_label(symbols[token])
        while True:
            arc = next((a for a in fst.arcs(state) if a.ilabel == label), None)
            if arc is not None:
                total += arc.weight
                state = arc.dst
                break
            arc = backoff_arc(state)
            if arc is None:
                return -math.inf
            total += arc.weight
            state = arc.dst
    while not fst.is_final(state):
        arc = backoff_arc(state)
        if arc is None:
            return -math.inf
        total += arc.weight
        state = arc.dst
    return total + fst.final_weight(state)


# ----------------------------------------------------------------------
# ARPA IO
# ----------------------------------------------------------------------


def _format_log10(value: float) -> str:
    if value == -math.inf or value <= ARPA_ZERO:
        return repr(ARPA_ZERO)
    return repr(value)


def _parse_log10(text: str) -> float:
    value = float(text)
    return -math.inf if value <= ARPA_ZERO else value


def write_arpa(lm: NgramLm) -> str:
    grams: dict[int, list[History]] = {k: [] for k in range(1, lm.order + 1)}
    for history, probs in lm.log10_probs.items():
        for token in probs:
            grams[len(history) + 1].append(history + (token,))
    if lm.order > 1 and (BOS,) in lm.log10_probs:
        grams[1].append((BOS,))

    lines = ["\\data\\"]
    lines.extend(f"ngram {k}={len(grams[k])}" for k in range(1, lm.order + 1))
    for k in range(1, lm.order + 1):
        lines.append("")
        lines.append(f"\\{k}-grams:")
        for gram in sorted(set(grams[k])):
            if gram == (BOS,):
                prob = ARPA_ZERO
            else:
                prob = lm.log10_probs[gram[:-1]][gram[-1]]
            line = f"{_format_log10(prob)}\t{' '.join(gram)}"
            if gram in lm.log10_backoffs:
                line += f"\t{_format_log10(lm.log10_backoffs[gram])}"
            lines.append(line)
    lines.append("")
    lines.append("\\end\\")
    return "\n".join(lines) + "\n"


def read_arpa(text: str) -> NgramLm:
    """
    Parse an ARPA backoff model.

    Raises:
        LanguageModelError: On a malformed file or inconsistent counts.
    """
    declared: dict[int, int] = {}
    seen: Counter[int] = Counter()
    log10_probs: dict[History, dict[str, float]] = {}
    log10_backoffs: dict[History, float] = {}
    section: Optional[int] = None
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line == "\\data\\":
            continue
        if line == "\\end\\":
            break
        if line.startswith("ngram "):
            k, _, n = line[len("ngram ") :].partition("=")
            declared[int(k)] = int(n)
            continue
        if line.startswith("\\") and line.endswith("-grams:"):
            section = int(line[1 : -len("-grams:")])
            continue
        if section is None:
            raise LanguageModelError(f"line {number}: n-gram entry before any section")
        fields = line.split("\t") if "\t" in line else line.split()
        if "\t" in line:
            prob_text, gram_text = fields[0], fields[1]
            gram = tuple(gram_text.split(" "))
            rest = fields[2:]
        else:
            prob_text = fields[0]
            gram = tuple(fields[1 : 1 + section])
            rest = fields[1 + section :]
        if len(gram) != section:
            raise LanguageModelError(f"line {number}: expected a {section}-gram")
        try:
            prob = _parse_log10(prob_text)
            if rest:
                log10_backoffs[gram] = _parse_log10(rest[0])
        except ValueError as e:
            raise LanguageModelError(f"line {number}: {e}") from e
        seen[section] += 1
        if gram == (BOS,):
            log10_probs.setdefault(gram, {})
            continue
        log10_probs.setdefault(gram[:-1], {})[gram[-1]] = prob

    if not declared:
        raise LanguageModelError("no \\data\\ header found")
    for k, n in declared.items():
        if seen[k] != n:
            raise LanguageModelError(f"header declares {n} {k}-grams, found {seen[k]}")
    order = max(declared)
    # (<s>,) is a context only through its backoff and continuations
    if (BOS,) in log10_probs and not log10_probs[(BOS,)]:
        del log10_probs[(BOS,)]
    vocab = tuple(sorted(w for w in log10_probs.get((), {}) if w not in (BOS, EOS)))
    return NgramLm(order, vocab, log10_probs, log10_backoffs)
