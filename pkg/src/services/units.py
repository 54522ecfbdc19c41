"""
Modeling-unit inventories and lexicons.

Four unit families share one inventory type: mono-characters, bi-characters
(left-context clustered by raw counts), chenones (tri-character states tied
by a decision tree) and wordpieces (BPE over marker-prefixed words). A base
inventory is turned into a trainable one by ``finalize_inventory`` which
adds Blank for CTC, second-version units for the chain topology, and drops
Silence for wordpiece-CTC.

Contexts are word-internal: a word-initial bi-char uses its character's
fallback unit, and tri-char contexts see ``#`` at both word edges.
"""

import hashlib
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from core.errors import HybridAmError
from core.logging import get_logger
from services.wfst import Fst, unit_label

logger = get_logger(__name__)

WORD_MARKER = "▁"
WORD_EDGE = "#"
FALLBACK_CONTEXT = "*"
DEFAULT_CHARSET = frozenset("abcdefghijklmnopqrstuvwxyz'")
VARIANCE_FLOOR = 1e-3


class UnitsError(HybridAmError):
    """Raised when an inventory, lexicon or tokenization cannot be built."""

    pass


class UnitKind(str, Enum):
    BLANK = "blank"
    SILENCE = "silence"
    CHAR = "char"
    BICHAR = "bichar"
    CHENONE = "chenone"
    WORDPIECE = "wp"
    SECOND = "second"


@dataclass(frozen=True)
class Unit:
    """One output-unit descriptor."""

    kind: UnitKind
    symbol: str = ""
    context: str = ""
    index: int = -1

    @property
    def descriptor(self) -> str:
        if self.kind is UnitKind.BLANK:
            return "<blk>"
        if self.kind is UnitKind.SILENCE:
            return "<sil>"
        if self.kind is UnitKind.CHAR:
            return f"char:{self.symbol}"
        if self.kind is UnitKind.BICHAR:
            return f"bichar:{self.context}|{self.symbol}"
        if self.kind is UnitKind.CHENONE:
            return f"chenone:{self.index}"
        if self.kind is UnitKind.WORDPIECE:
            return f"wp:{self.symbol}"
        return f"second:{self.index}"

    @classmethod
    def parse(cls, text: str) -> "Unit":
        if text == "<blk>":
            return BLANK
        if text == "<sil>":
            return SILENCE
        kind, sep, rest = text.partition(":")
        if not sep or not rest:
            raise UnitsError(f"malformed unit descriptor '{text}'")
        if kind == "char":
            return cls(UnitKind.CHAR, symbol=rest)
        if kind == "bichar":
            context, bar, char = rest.partition("|")
            if not bar or not char:
                raise UnitsError(f"malformed bi-char descriptor '{text}'")
            return cls(UnitKind.BICHAR, symbol=char, context=context)
        if kind == "chenone":
            return cls(UnitKind.CHENONE, index=int(rest))
        if kind == "wp":
            return cls(UnitKind.WORDPIECE, symbol=rest)
        if kind == "second":
            return cls(UnitKind.SECOND, index=int(rest))
        raise UnitsError(f"unknown unit kind in '{text}'")


BLANK = Unit(UnitKind.BLANK)
SILENCE = Unit(UnitKind.SILENCE)


@dataclass(frozen=True)
class UnitInventory:
    """
    Dense id <-> descriptor map.

    ``topology`` is None for a base inventory; ``finalize_inventory`` sets it.
    """

    units: tuple[Unit, ...]
    unit_type: str
    topology: Optional[str] = None
    _index: dict[Unit, int] = field(
        default_factory=dict, init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        index: dict[Unit, int] = {}
        for i, unit in enumerate(self.units):
            if unit in index:
                raise UnitsError(f"duplicate unit {unit.descriptor}")
            index[unit] = i
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.units)

    def __len__(self) -> int:
        return len(self.units)

    def id_of(self, unit: Unit) -> int:
        try:
            return self._index[unit]
        except KeyError as e:
            raise UnitsError(f"unit {unit.descriptor} not in inventory") from e

    def get(self, unit: Unit) -> Optional[int]:
        return self._index.get(unit)

    def __contains__(self, unit: object) -> bool:
        return unit in self._index

    @property
    def blank_id(self) -> Optional[int]:
        return self._index.get(BLANK)

    @property
    def silence_id(self) -> Optional[int]:
        return self._index.get(SILENCE)

    @property
    def base_ids(self) -> tuple[int, ...]:
        """Ids usable as labels: everything except Blank and second versions."""
        return tuple(
            i
            for i, u in enumerate(self.units)
            if u.kind not in (UnitKind.BLANK, UnitKind.SECOND)
        )

    def second_of(self, base_id: int) -> Optional[int]:
        return self._index.get(Unit(UnitKind.SECOND, index=base_id))

    def base_of(self, unit_id: int) -> int:
        unit = self.units[unit_id]
        return unit.index if unit.kind is UnitKind.SECOND else unit_id

    def is_silence_or_blank(self, unit_id: int) -> bool:
        kind = self.units[self.base_of(unit_id)].kind
        return kind in (UnitKind.SILENCE, UnitKind.BLANK)

    def chars(self) -> tuple[str, ...]:
        """Characters underlying a char-based inventory, in codepoint order."""
        found = {
            u.symbol
            for u in self.units
            if u.kind in (UnitKind.CHAR, UnitKind.BICHAR) and u.symbol
        }
        return tuple(sorted(found))

    def to_tsv(self) -> str:
        lines = [f"# unit_type={self.unit_type}"]
        if self.topology is not None:
            lines.append(f"# topology={self.topology}")
        lines.extend(f"{i}\t{u.descriptor}" for i, u in enumerate(self.units))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> "UnitInventory":
        meta: dict[str, str] = {}
        units: list[Unit] = []
        for line in text.splitlines():
            if not line.strip():
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
                continue
            idx, sep, descriptor = line.partition("\t")
            if not sep or int(idx) != len(units):
                raise UnitsError(f"inventory ids must be dense and ordered: '{line}'")
            units.append(Unit.parse(descriptor))
        if "unit_type" not in meta:
            raise UnitsError("inventory TSV lacks a '# unit_type=' header")
        return cls(tuple(units), meta["unit_type"], meta.get("topology"))

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_tsv().encode("utf-8")).hexdigest()[:16]


# ----------------------------------------------------------------------
# Corpus helpers
# ----------------------------------------------------------------------


def corpus_words(corpus: Iterable[str]) -> list[str]:
    return [word for line in corpus for word in line.split()]


def check_charset(corpus: Sequence[str], charset: frozenset[str]) -> None:
    offending = sorted(
        {ch for ch in "".join(corpus_words(corpus)) if ch not in charset}
    )
    if offending:
        codepoints = ", ".join(f"U+{ord(ch):04X}" for ch in offending)
        raise UnitsError(f"characters outside the declared charset: {codepoints}")


def _require_corpus(corpus: Sequence[str]) -> list[str]:
    words = corpus_words(corpus)
    if not words:
        raise UnitsError("corpus is empty")
    return words


# ----------------------------------------------------------------------
# Mono-char and bi-char
# ----------------------------------------------------------------------


def build_char_inventory(
    corpus: Sequence[str], charset: frozenset[str] = DEFAULT_CHARSET
) -> UnitInventory:
    """Silence followed by every distinct character in codepoint order."""
    words = _require_corpus(corpus)
    check_charset(corpus, charset)
    chars = sorted(set("".join(words)))
    units = (SILENCE, *(Unit(UnitKind.CHAR, symbol=c) for c in chars))
    return UnitInventory(units, "mono-char")


def bigram_counts(corpus: Sequence[str]) -> Counter[tuple[str, str]]:
    """Word-internal (left, char) bigram counts; word-initial chars have none."""
    counts: Counter[tuple[str, str]] = Counter()
    for word in corpus_words(corpus):
        for left, char in zip(word, word[1:]):
            counts[(left, char)] += 1
    return counts


def cluster_bichar(
    corpus: Sequence[str],
    max_units: int,
    charset: frozenset[str] = DEFAULT_CHARSET,
) -> UnitInventory:
    """
    Text-based bi-char clustering by raw counts.

    Every character gets a fallback unit shared by its infrequent (and
    word-initial) occurrences; the most frequent in-word bigrams get their
    own unit until ``max_units`` (Silence included) is reached. Count ties
    are broken by lexicographic bigram order.
    """
    words = _require_corpus(corpus)
    check_charset(corpus, charset)
    chars = sorted(set("".join(words)))
    if max_units < len(chars) + 1:
        raise UnitsError(
            f"max_units={max_units} is below the floor of {len(chars) + 1} "
            "(one fallback unit per character plus silence)"
        )
    ranked = sorted(bigram_counts(corpus).items(), key=lambda kv: (-kv[1], kv[0]))
    budget = max_units - len(chars) - 1
    kept = sorted(bigram for bigram, _ in ranked[:budget])
    units = [SILENCE]
    units.extend(
        Unit(UnitKind.BICHAR, symbol=c, context=FALLBACK_CONTEXT) for c in chars
    )
    units.extend(Unit(UnitKind.BICHAR, symbol=c, context=l) for l, c in kept)
    logger.info(
        "bi-char inventory built",
        extra={"extra_fields": {"units": len(units), "kept_bigrams": len(kept)}},
    )
    return UnitInventory(tuple(units), "bi-char")


def bichar_unit(inv: UnitInventory, left: Optional[str], char: str) -> int:
    """Unit for ``char`` after ``left`` (None at word start)."""
    if left is not None:
        unit = inv.get(Unit(UnitKind.BICHAR, symbol=char, context=left))
        if unit is not None:
            return unit
    fallback = inv.get(Unit(UnitKind.BICHAR, symbol=char, context=FALLBACK_CONTEXT))
    if fallback is None:
        raise UnitsError(f"character '{char}' has no bi-char unit")
    return fallback


# ----------------------------------------------------------------------
# Chenones
# ----------------------------------------------------------------------

TriChar = tuple[str, str, str]
Question = frozenset[str]


@dataclass
class GaussianStats:
    """Sufficient statistics of a diagonal Gaussian."""

    count: float
    total: np.ndarray
    total_sq: np.ndarray

    @classmethod
    def empty(cls, dim: int) -> "GaussianStats":
        return cls(0.0, np.zeros(dim), np.zeros(dim))

    def add(self, other: "GaussianStats") -> "GaussianStats":
        return GaussianStats(
            self.count + other.count,
            self.total + other.total,
            self.total_sq + other.total_sq,
        )

    def log_likelihood(self) -> float:
        if self.count <= 0:
            return 0.0
        mean = self.total / self.count
        var = np.maximum(self.total_sq / self.count - mean**2, VARIANCE_FLOOR)
        return float(-0.5 * self.count * np.sum(np.log(2.0 * np.pi * var) + 1.0))


def accumulate_trichar_stats(
    labels: Sequence[Optional[TriChar]], features: np.ndarray
) -> tuple[dict[TriChar, GaussianStats], int]:
    """
    Per tri-char state statistics from frame labels and features.

    Frames labelled None (silence or unaligned) are excluded; their count is
    returned so the caller can warn about it.
    """
    if len(labels) != len(features):
        raise UnitsError(
            f"{len(labels)} frame labels for {len(features)} feature frames"
        )
    stats: dict[TriChar, GaussianStats] = {}
    skipped = 0
    for label, row in zip(labels, features):
        if label is None:
            skipped += 1
            continue
        row = np.asarray(row, dtype=np.float64)
        current = stats.get(label) or GaussianStats.empty(row.shape[0])
        stats[label] = current.add(GaussianStats(1.0, row, row * row))
    return stats, skipped


def default_questions(chars: Sequence[str]) -> list[Question]:
    """Singleton classes for every context symbol plus the all-chars class."""
    questions = [frozenset({c}) for c in sorted(chars)]
    questions.append(frozenset({WORD_EDGE}))
    questions.append(frozenset(chars))
    return questions


@dataclass
class TreeNode:
    center: str
    side: Optional[str] = None  # "left" | "right" for internal nodes
    members: Question = frozenset()
    yes: Optional["TreeNode"] = None
    no: Optional["TreeNode"] = None
    leaf: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.side is None


@dataclass
class ChenoneTree:
    """Binary question tree per center character answering (l, c, r) -> leaf."""

    roots: dict[str, TreeNode]
    num_leaves: int
    split_gains: list[float] = field(default_factory=list)

    def leaf(self, left: str, center: str, right: str) -> int:
        node = self.roots.get(center)
        if node is None:
            raise UnitsError(f"no tree for center character '{center}'")
        while not node.is_leaf:
            context = left if node.side == "left" else right
            node = node.yes if context in node.members else node.no
            assert node is not None
        return node.leaf

    @property
    def chars(self) -> tuple[str, ...]:
        return tuple(sorted(self.roots))

    def to_tsv(self) -> str:
        lines: list[str] = []

        def emit(node: TreeNode) -> None:
            if node.is_leaf:
                lines.append(f"{node.center}\tL\t{node.leaf}")
                return
            members = " ".join(sorted(node.members))
            lines.append(f"{node.center}\tQ\t{node.side}\t{members}")
            assert node.yes is not None and node.no is not None
            emit(node.yes)
            emit(node.no)

        for center in sorted(self.roots):
            emit(self.roots[center])
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str) -> "ChenoneTree":
        rows = [line.split("\t") for line in text.splitlines() if line.strip()]
        position = 0

        def parse() -> TreeNode:
            nonlocal position
            if position >= len(rows):
                raise UnitsError("truncated chenone tree")
            row = rows[position]
            position += 1
            if row[1] == "L":
                return TreeNode(center=row[0], leaf=int(row[2]))
            node = TreeNode(
                center=row[0], side=row[2], members=frozenset(row[3].split(" "))
            )
            node.yes = parse()
            node.no = parse()
            return node

        roots: dict[str, TreeNode] = {}
        leaves = 0
        while position < len(rows):
            root = parse()
            roots[root.center] = root
        for root in roots.values():
            stack = [root]
            while stack:
                node = stack.pop()
                if node.is_leaf:
                    leaves += 1
                else:
                    stack.extend([node.yes, node.no])  # type: ignore[list-item]
        return cls(roots, leaves)


def _split_gain(
    members: Sequence[TriChar],
    stats: Mapping[TriChar, GaussianStats],
    side: str,
    question: Question,
    parent_ll: float,
) -> Optional[tuple[float, list[TriChar], list[TriChar]]]:
    position = 0 if side == "left" else 2
    yes = [t for t in members if t[position] in question]
    no = [t for t in members if t[position] not in question]
    if not yes or not no:
        return None
    dim = next(iter(stats.values())).total.shape[0]
    yes_stats = GaussianStats.empty(dim)
    for t in yes:
        yes_stats = yes_stats.add(stats[t])
    no_stats = GaussianStats.empty(dim)
    for t in no:
        no_stats = no_stats.add(stats[t])
    gain = yes_stats.log_likelihood() + no_stats.log_likelihood() - parent_ll
    return gain, yes, no


def build_chenone_tree(
    stats: Mapping[TriChar, GaussianStats],
    questions: Sequence[Question],
    target_leaves: int,
    chars: Sequence[str],
    min_gain: float = 0.0,
) -> tuple[UnitInventory, ChenoneTree]:
    """
    Greedy top-down tying of tri-char states.

    One root per center character; at every step the leaf/question pair with
    the largest likelihood gain is split, until ``target_leaves`` is reached
    or the best gain does not exceed ``min_gain``.
    """
    centers = sorted(set(chars))
    if target_leaves < len(centers):
        raise UnitsError(
            f"target_leaves={target_leaves} is below the number of center characters "
            f"({len(centers)})"
        )
    roots = {c: TreeNode(center=c) for c in centers}
    members: dict[int, list[TriChar]] = {}
    for c in centers:
        members[id(roots[c])] = sorted(t for t in stats if t[1] == c)
    leaves: list[TreeNode] = [roots[c] for c in centers]
    split_gains: list[float] = []
    best_cache: dict[int, Optional[tuple[float, str, Question, list, list]]] = {}

    def node_ll(node_members: Sequence[TriChar]) -> float:
        if not node_members:
            return 0.0
        dim = stats[node_members[0]].total.shape[0]
        total = GaussianStats.empty(dim)
        for t in node_members:
            total = total.add(stats[t])
        return total.log_likelihood()

    def best_split(node: TreeNode) -> Optional[tuple[float, str, Question, list, list]]:
        key = id(node)
        if key not in best_cache:
            node_members = members[key]
            parent_ll = node_ll(node_members)
            best = None
            for side in ("left", "right"):
                for question in questions:
                    found = _split_gain(node_members, stats, side, question, parent_ll)
                    if found is not None and (best is None or found[0] > best[0]):
                        best = (found[0], side, question, found[1], found[2])
            if best is not None:
                tolerance = 1e-9 * max(1.0, abs(parent_ll))
                if best[0] <= min_gain + tolerance:
                    best = None
            best_cache[key] = best
        return best_cache[key]

    while len(leaves) < target_leaves:
        candidates = [(best_split(node), i) for i, node in enumerate(leaves)]
        scored = [(found[0], -i, i) for found, i in candidates if found is not None]
        if not scored:
            break
        _, _, pick = max(scored)
        node = leaves[pick]
        split = best_split(node)
        gain, side, question, yes_members, no_members = split  # type: ignore[misc]
        node.side, node.members = side, question
        node.yes, node.no = TreeNode(center=node.center), TreeNode(center=node.center)
        members[id(node.yes)] = yes_members
        members[id(node.no)] = no_members
        leaves[pick : pick + 1] = [node.yes, node.no]
        split_gains.append(gain)

    leaf_id = 0
    for c in centers:
        stack = [roots[c]]
        while stack:
            node = stack.pop()
            if node.is_leaf:
                node.leaf = leaf_id
                leaf_id += 1
            else:
                stack.extend([node.no, node.yes])  # type: ignore[list-item]

    tree = ChenoneTree(roots, leaf_id, split_gains)
    units = (SILENCE, *(Unit(UnitKind.CHENONE, index=k) for k in range(leaf_id)))
    logger.info(
        "chenone tree built",
        extra={"extra_fields": {"leaves": leaf_id, "splits": len(split_gains)}},
    )
    return UnitInventory(units, "chenone"), tree


def word_trichars(word: str) -> list[TriChar]:
    padded = WORD_EDGE + word + WORD_EDGE
    return [(padded[i - 1], padded[i], padded[i + 1]) for i in range(1, len(word) + 1)]


def chenone_units(inv: UnitInventory, tree: ChenoneTree, word: str) -> list[int]:
    return [
        inv.id_of(Unit(UnitKind.CHENONE, index=tree.leaf(*t)))
        for t in word_trichars(word)
    ]


# ----------------------------------------------------------------------
# Wordpieces
# ----------------------------------------------------------------------


def _initial_symbols(word: str) -> list[str]:
    return [WORD_MARKER + word[0], *word[1:]]


def _merge_word(symbols: list[str], pair: tuple[str, str]) -> list[str]:
    merged: list[str] = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and (symbols[i], symbols[i + 1]) == pair:
            merged.append(symbols[i] + symbols[i + 1])
            i += 2
        else:
            merged.append(symbols[i])
            i += 1
    return merged


def train_wordpiece_vocab(corpus: Sequence[str], vocab_size: int) -> UnitInventory:
    """
    Byte-pair-encoding merges over marker-prefixed words.

    The character floor counts every initial symbol, i.e. characters plus the
    marker-fused variants of word-initial characters. Each merge picks the
    most frequent adjacent pair; ties go to the lexicographically smallest
    pair.
    """
    words = Counter(_require_corpus(corpus))
    segmented = {word: _initial_symbols(word) for word in sorted(words)}
    floor = sorted({s for symbols in segmented.values() for s in symbols})
    if vocab_size < len(floor):
        raise UnitsError(
            f"vocab_size={vocab_size} is below the character floor of {len(floor)}"
        )
    vocab = list(floor)
    known = set(vocab)
    while len(vocab) < vocab_size:
        pairs: Counter[tuple[str, str]] = Counter()
        for word, symbols in segmented.items():
            for pair in zip(symbols, symbols[1:]):
                pairs[pair] += words[word]
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        segmented = {w: _merge_word(s, best) for w, s in segmented.items()}
        piece = best[0] + best[1]
        if piece not in known:
            known.add(piece)
            vocab.append(piece)
    units = (SILENCE, *(Unit(UnitKind.WORDPIECE, symbol=p) for p in vocab))
    return UnitInventory(units, "wordpiece")


def tokenize_wordpiece(word: str, inv: UnitInventory) -> list[int]:
    """Greedy longest match over the marker-prefixed word."""
    pieces = {
        u.symbol: i for i, u in enumerate(inv.units) if u.kind is UnitKind.WORDPIECE
    }
    known_chars = {ch for p in pieces for ch in p if ch != WORD_MARKER}
    for ch in word:
        if ch not in known_chars:
            raise UnitsError(
                f"cannot tokenize '{word}': character '{ch}' is not in the vocabulary"
            )
    text = WORD_MARKER + word
    longest = max((len(p) for p in pieces), default=0)
    ids: list[int] = []
    position = 0
    while position < len(text):
        for end in range(min(len(text), position + longest), position, -1):
            unit = pieces.get(text[position:end])
            if unit is not None:
                ids.append(unit)
                position = end
                break
        else:
            raise UnitsError(
                f"cannot tokenize '{word}': no piece covers '{text[position]}' "
                f"at offset {position}"
            )
    return ids


def detokenize_wordpiece(ids: Sequence[int], inv: UnitInventory) -> str:
    text = "".join(inv.units[i].symbol for i in ids)
    return text[1:] if text.startswith(WORD_MARKER) else text


# ----------------------------------------------------------------------
# Finalizing and lexicons
# ----------------------------------------------------------------------


def finalize_inventory(base: UnitInventory, topology: str) -> UnitInventory:
    """Add Blank / second versions and apply the wordpiece-CTC silence rule."""
    if base.topology is not None:
        raise UnitsError(f"inventory is already finalized for {base.topology}")
    if topology not in ("ctc", "hmm1", "chain"):
        raise UnitsError(f"unknown topology '{topology}'")
    units = list(base.units)
    if topology == "ctc" and base.unit_type == "wordpiece":
        units = [u for u in units if u != SILENCE]
    if topology == "chain":
        units.extend(Unit(UnitKind.SECOND, index=i) for i in range(len(units)))
    if topology == "ctc":
        units.append(BLANK)
    return UnitInventory(tuple(units), base.unit_type, topology)


def base_inventory(inv: UnitInventory) -> UnitInventory:
    """Strip the topology additions again (used to re-finalize)."""
    units = tuple(
        u for u in inv.units if u.kind not in (UnitKind.BLANK, UnitKind.SECOND)
    )
    return UnitInventory(units, inv.unit_type)


@dataclass
class Lexicon:
    """word -> one or more unit-id sequences."""

    entries: dict[str, list[tuple[int, ...]]]

    def __post_init__(self) -> None:
        for word, prons in self.entries.items():
            if not prons or any(not p for p in prons):
                raise UnitsError(f"word '{word}' has an empty pronunciation")

    @property
    def words(self) -> list[str]:
        return sorted(self.entries)

    def units(self, word: str) -> tuple[int, ...]:
        try:
            return self.entries[word][0]
        except KeyError as e:
            raise UnitsError(f"word '{word}' is not in the lexicon") from e

    def to_tsv(self) -> str:
        lines = [
            f"{word}\t{' '.join(str(u) for u in pron)}"
            for word in self.words
            for pron in self.entries[word]
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_tsv(cls, text: str) -> "Lexicon":
        entries: dict[str, list[tuple[int, ...]]] = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            word, sep, units = line.partition("\t")
            if not sep:
                raise UnitsError(f"malformed lexicon line '{line}'")
            entries.setdefault(word, []).append(tuple(int(u) for u in units.split()))
        return cls(entries)


def word_units(
    word: str, inv: UnitInventory, tree: Optional[ChenoneTree] = None
) -> tuple[int, ...]:
    """Unit sequence of one word for any unit type."""
    if inv.unit_type == "mono-char":
        return tuple(inv.id_of(Unit(UnitKind.CHAR, symbol=c)) for c in word)
    if inv.unit_type == "bi-char":
        return tuple(
            bichar_unit(inv, word[i - 1] if i else None, c) for i, c in enumerate(word)
        )
    if inv.unit_type == "chenone":
        if tree is None:
            raise UnitsError("chenone lexicons need the decision tree")
        return tuple(chenone_units(inv, tree, word))
    if inv.unit_type == "wordpiece":
        return tuple(tokenize_wordpiece(word, inv))
    raise UnitsError(f"unknown unit type '{inv.unit_type}'")


def build_lexicon(
    words: Iterable[str], inv: UnitInventory, tree: Optional[ChenoneTree] = None
) -> Lexicon:
    entries = {word: [word_units(word, inv, tree)] for word in sorted(set(words))}
    if not entries:
        raise UnitsError("no words to put in the lexicon")
    return Lexicon(entries)


def build_lexicon_fst(
    lex: Lexicon,
    allow_silence_between_words: bool,
    silence_id: Optional[int] = None,
    word_ids: Optional[Mapping[str, int]] = None,
) -> Fst:
    """
    Transducer from unit-label sequences to word-label sequences.

    The word label sits on the first unit of its pronunciation; with
    silence allowed, a Silence self-loop on the word-boundary state accepts
    sil* between words and at both ends. Every arc weighs 0.
    """
    if not lex.entries:
        raise UnitsError("lexicon is empty")
    if allow_silence_between_words and silence_id is None:
        raise UnitsError("silence between words needs a silence unit")
    ids = word_ids if word_ids is not None else {w: i for i, w in enumerate(lex.words)}

    fst = Fst(input_alphabet="labels", output_alphabet="words")
    boundary = fst.add_state()
    fst.set_start(boundary)
    fst.set_final(boundary, 0.0)
    if allow_silence_between_words:
        assert silence_id is not None
        fst.add_arc(boundary, boundary, unit_label(silence_id), 0, 0.0)
    for word in lex.words:
        if word not in ids:
            continue
        for pron in lex.entries[word]:
            state = boundary
            for position, unit in enumerate(pron):
                last = position == len(pron) - 1
                dst = boundary if last else fst.add_state()
                olabel = unit_label(ids[word]) if position == 0 else 0
                fst.add_arc(state, dst, unit_label(unit), olabel, 0.0)
                state = dst
    return fst
