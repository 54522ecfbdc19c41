"""
Utterances, their on-disk formats and the synthetic corpus generator.

Feature files are ``LFAM`` blobs: the magic, little-endian u32 frame count
and dimension, then float32 values row-major. A feature directory holds one
``<utt_id>.lfam`` per utterance. Transcripts are ``utt_id<TAB>words`` lines.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from core.errors import HybridAmError
from core.logging import get_logger
from services.topology import Segment
from services.units import (
    DEFAULT_CHARSET,
    UnitInventory,
    UnitsError,
    build_char_inventory,
)

logger = get_logger(__name__)

FEATURE_MAGIC = b"LFAM"
FEATURE_SUFFIX = ".lfam"
_HEADER = np.dtype("<u4")
_VALUES = np.dtype("<f4")


class CorpusError(HybridAmError):
    """Raised on malformed corpus files or unusable utterances."""

    pass


@dataclass
class Utterance:
    utt_id: str
    features: np.ndarray
    words: tuple[str, ...]

    @property
    def num_frames(self) -> int:
        return int(self.features.shape[0])


# ----------------------------------------------------------------------
# Features
# ----------------------------------------------------------------------


def encode_features(features: np.ndarray) -> bytes:
    if features.ndim != 2:
        raise CorpusError(
            f"features must be a T x F matrix, got shape {features.shape}"
        )
    header = np.array(features.shape, dtype=_HEADER).tobytes()
    payload = np.ascontiguousarray(features, dtype=_VALUES).tobytes()
    return FEATURE_MAGIC + header + payload


def decode_features(data: bytes) -> np.ndarray:
    """
    Parse one LFAM blob into a float64 matrix.

    Raises:
        CorpusError: On a bad magic, a truncated body or non-finite values.
    """
    if data[:4] != FEATURE_MAGIC:
        raise CorpusError("feature file does not start with LFAM")
    if len(data) < 12:
        raise CorpusError("feature file header is truncated")
    frames, dim = (
        int(v) for v in np.frombuffer(data, dtype=_HEADER, count=2, offset=4)
    )
    expected = 12 + frames * dim * _VALUES.itemsize
    if len(data) != expected:
        raise CorpusError(
            f"feature file holds {len(data)} bytes, header promises {expected}"
        )
    values = np.frombuffer(data, dtype=_VALUES, offset=12).reshape(frames, dim)
    if not np.isfinite(values).all():
        raise CorpusError("feature file contains non-finite values")
    return values.astype(np.float64)


def write_feature_dir(path: Path, features: Mapping[str, np.ndarray]) -> None:
    path.mkdir(parents=True, exist_ok=True)
    for utt_id in sorted(features):
        target = path / f"{utt_id}{FEATURE_SUFFIX}"
        target.write_bytes(encode_features(features[utt_id]))


def read_feature_dir(path: Path) -> dict[str, np.ndarray]:
    if not path.is_dir():
        raise CorpusError(f"feature directory not found: {path}")
    return {
        file.name[: -len(FEATURE_SUFFIX)]: decode_features(file.read_bytes())
        for file in sorted(path.glob(f"*{FEATURE_SUFFIX}"))
    }


# ----------------------------------------------------------------------
# Transcripts
# ----------------------------------------------------------------------


def read_transcripts(text: str) -> dict[str, tuple[str, ...]]:
    transcripts: dict[str, tuple[str, ...]] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        utt_id, sep, words = line.partition("\t")
        if not sep or not utt_id:
            raise CorpusError(f"transcript line {number}: expected 'utt_id<TAB>words'")
        if utt_id in transcripts:
            raise CorpusError(
                f"transcript line {number}: duplicate utterance '{utt_id}'"
            )
        transcripts[utt_id] = tuple(words.split())
    return transcripts


def write_transcripts(transcripts: Mapping[str, Sequence[str]]) -> str:
    lines = [
        f"{utt_id}\t{' '.join(transcripts[utt_id])}" for utt_id in sorted(transcripts)
    ]
    return "\n".join(lines) + ("\n" if lines else "")


def load_corpus(
    transcripts: Mapping[str, Sequence[str]], features: Mapping[str, np.ndarray]
) -> list[Utterance]:
    """Join transcripts with features; utterances come back in id order."""
    missing = sorted(set(transcripts) - set(features))
    if missing:
        raise CorpusError(
            f"no features for utterance '{missing[0]}' ({len(missing)} missing)"
        )
    return [
        Utterance(utt_id, features[utt_id], tuple(transcripts[utt_id]))
        for utt_id in sorted(transcripts)
    ]


# ----------------------------------------------------------------------
# Synthetic data
# ----------------------------------------------------------------------


@dataclass
class SyntheticCorpus:
    """
    Generated utterances with their ground truth.

    ``segments`` are character-level segments (ids of ``inventory``) at the
    output frame rate; ``word_times`` are (word, start, end) triples on the
    same clock.
    """

    utterances: list[Utterance]
    inventory: UnitInventory
    segments: dict[str, list[Segment]] = field(default_factory=dict)
    word_times: dict[str, list[tuple[str, int, int]]] = field(default_factory=dict)

    @property
    def transcripts(self) -> dict[str, tuple[str, ...]]:
        return {u.utt_id: u.words for u in self.utterances}


def generate_synthetic_corpus(
    words: Sequence[str],
    n_utts: int,
    seed: int,
    stride: int = 4,
    feat_dim: int = 16,
    p_sil: float = 0.2,
    max_words: int = 3,
    durations: tuple[int, int] = (2, 4),
    noise: float = 0.3,
    separation: float = 2.0,
    means: Optional[np.ndarray] = None,
    onset: float = 0.0,
) -> SyntheticCorpus:
    """
    Sample utterances whose features come from per-character Gaussian means.

    Every character (and silence) lasts a uniform number of output frames
    in ``durations``; each output frame spans ``stride`` input frames. A
    silence is drawn independently with probability ``p_sil`` at the start,
    between words and at the end. With ``onset`` > 0 the first output frame
    of every segment also carries ``onset`` times a shared onset vector, so
    segment starts are visible in the features.

    Raises:
        CorpusError: On an empty vocabulary or characters outside the charset.
    """
    vocab = sorted(set(words))
    if not vocab or n_utts < 1:
        raise CorpusError("synthetic corpus needs at least one word and one utterance")
    if not 0.0 <= p_sil < 1.0:
        raise CorpusError(f"p_sil must lie in [0, 1), got {p_sil}")
    low, high = durations
    if not 1 <= low <= high:
        raise CorpusError(f"invalid duration range {durations}")
    if onset < 0.0:
        raise CorpusError(f"onset must be >= 0, got {onset}")
    try:
        inventory = build_char_inventory(vocab, DEFAULT_CHARSET)
    except UnitsError as e:
        raise CorpusError(str(e)) from e
    silence = inventory.silence_id
    assert silence is not None
    char_ids = {u.symbol: i for i, u in enumerate(inventory.units) if u.symbol}

    rng = np.random.default_rng(seed)
    if means is None:
        means = rng.normal(0.0, separation, size=(inventory.size, feat_dim))
    elif means.shape != (inventory.size, feat_dim):
        raise CorpusError(f"means must have shape {(inventory.size, feat_dim)}")
    onset_vector = np.zeros(feat_dim)
    if onset > 0.0:
        onset_vector = onset * rng.normal(0.0, separation, size=feat_dim)

    corpus = SyntheticCorpus([], inventory)
    for index in range(n_utts):
        utt_id = f"synth-{index:05d}"
        count = int(rng.integers(1, max_words + 1))
        chosen = [vocab[k] for k in rng.integers(0, len(vocab), size=count)]
        pauses = rng.random(len(chosen) + 1) < p_sil

        units: list[int] = []
        for position, word in enumerate(chosen):
            if pauses[position]:
                units.append(silence)
            units.extend(char_ids[char] for char in word)
        if pauses[-1]:
            units.append(silence)
        lengths = rng.integers(low, high + 1, size=len(units))

        segments: list[Segment] = []
        clock = 0
        for unit, length in zip(units, lengths):
            segments.append(Segment(unit, clock, clock + int(length)))
            clock += int(length)

        times: list[tuple[str, int, int]] = []
        speech = iter(s for s in segments if s.unit != silence)
        for word in chosen:
            spans = [next(speech) for _ in word]
            times.append((word, spans[0].start, spans[-1].end))

        rows = []
        for segment in segments:
            span = (segment.end - segment.start) * stride
            block = means[segment.unit] + noise * rng.normal(size=(span, feat_dim))
            block[:stride] += onset_vector
            rows.append(block)
        features = np.concatenate(rows, axis=0)
        corpus.utterances.append(Utterance(utt_id, features, tuple(chosen)))
        corpus.segments[utt_id] = segments
        corpus.word_times[utt_id] = times

    logger.info(
        "synthetic corpus generated",
        extra={
            "extra_fields": {
                "utterances": n_utts,
                "vocabulary": len(vocab),
                "seed": seed,
            }
        },
    )
    return corpus
