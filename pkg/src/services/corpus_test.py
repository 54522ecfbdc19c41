"""
Tests for corpus file formats and synthetic data.
"""

import numpy as np
import pytest

from services.corpus import (
    CorpusError,
    decode_features,
    encode_features,
    generate_synthetic_corpus,
    load_corpus,
    read_feature_dir,
    read_transcripts,
    write_feature_dir,
    write_transcripts,
)


def test_feature_blob_layout():
    """Magic, little-endian u32 T and F, then float32 row-major."""
    features = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])

    data = encode_features(features)

    assert data[:4] == b"LFAM"
    assert data[4:8] == (2).to_bytes(4, "little")
    assert data[8:12] == (3).to_bytes(4, "little")
    assert len(data) == 12 + 6 * 4
    np.testing.assert_array_equal(decode_features(data), features)


def test_feature_blob_rejects_bad_input():
    """Bad magic, truncation and NaNs are errors."""
    data = encode_features(np.zeros((2, 2)))

    with pytest.raises(CorpusError):
        decode_features(b"XXXX" + data[4:])
    with pytest.raises(CorpusError):
        decode_features(data[:-4])
    with pytest.raises(CorpusError):
        decode_features(encode_features(np.array([[np.nan]])))


def test_feature_dir_round_trip(tmp_path):
    """One file per utterance, read back by id."""
    features = {"u1": np.ones((3, 2)), "u2": np.zeros((5, 2))}

    write_feature_dir(tmp_path / "feats", features)
    back = read_feature_dir(tmp_path / "feats")

    assert sorted(back) == ["u1", "u2"]
    np.testing.assert_array_equal(back["u2"], features["u2"])


def test_transcripts_round_trip():
    """Transcripts are written in id order."""
    text = "b\tx y\na\tz\n"

    transcripts = read_transcripts(text)

    assert transcripts == {"b": ("x", "y"), "a": ("z",)}
    assert write_transcripts(transcripts) == "a\tz\nb\tx y\n"


def test_transcripts_reject_duplicates_and_bad_lines():
    """Duplicate ids and lines without a tab are refused."""
    with pytest.raises(CorpusError):
        read_transcripts("a\tx\na\ty\n")
    with pytest.raises(CorpusError):
        read_transcripts("no-tab-here\n")


def test_load_corpus_requires_features():
    """Every transcript needs its features."""
    with pytest.raises(CorpusError, match="u2"):
        load_corpus({"u1": ("a",), "u2": ("b",)}, {"u1": np.zeros((4, 2))})


def test_synthetic_segments_tile_utterances():
    """Segments cover every output frame; features span stride frames each."""
    synth = generate_synthetic_corpus(
        ["ab", "c"], n_utts=10, seed=0, stride=3, feat_dim=5
    )

    for utterance in synth.utterances:
        segments = synth.segments[utterance.utt_id]
        assert segments[0].start == 0
        assert all(a.end == b.start for a, b in zip(segments, segments[1:]))
        assert utterance.num_frames == segments[-1].end * 3
        assert utterance.features.shape[1] == 5


def test_synthetic_word_times_match_segments():
    """Word times start and end on character segment boundaries."""
    synth = generate_synthetic_corpus(["ab", "c"], n_utts=10, seed=2, p_sil=0.5)
    silence = synth.inventory.silence_id

    for utterance in synth.utterances:
        times = synth.word_times[utterance.utt_id]
        speech = [s for s in synth.segments[utterance.utt_id] if s.unit != silence]
        assert [w for w, _, _ in times] == list(utterance.words)
        assert times[0][1] == speech[0].start
        assert times[-1][2] == speech[-1].end
        assert len(speech) == sum(len(w) for w in utterance.words)


def test_synthetic_corpus_is_seeded():
    """Same seed, same data."""
    a = generate_synthetic_corpus(["ab", "c"], n_utts=3, seed=5)
    b = generate_synthetic_corpus(["ab", "c"], n_utts=3, seed=5)

    assert a.transcripts == b.transcripts
    for x, y in zip(a.utterances, b.utterances):
        np.testing.assert_array_equal(x.features, y.features)


def test_synthetic_corpus_rejects_empty_vocabulary():
    """At least one word is needed."""
    with pytest.raises(CorpusError):
        generate_synthetic_corpus([], n_utts=3, seed=0)


def test_synthetic_onset_marks_segment_starts():
    """Only the first output frame of each segment carries the onset offset."""
    synth = generate_synthetic_corpus(
        ["ab"],
        n_utts=4,
        seed=0,
        stride=2,
        feat_dim=4,
        noise=0.0,
        means=np.zeros((3, 4)),
        onset=1.0,
    )

    for utterance in synth.utterances:
        marked = np.flatnonzero(np.any(utterance.features != 0.0, axis=1))
        starts = [
            2 * s.start + k for s in synth.segments[utterance.utt_id] for k in (0, 1)
        ]
        assert marked.tolist() == starts


def test_synthetic_corpus_rejects_negative_onset():
    """The onset scale cannot be negative."""
    with pytest.raises(CorpusError):
        generate_synthetic_corpus(["ab"], n_utts=1, seed=0, onset=-1.0)
