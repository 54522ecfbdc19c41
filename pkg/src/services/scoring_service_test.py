"""
Tests for the scoring service.
"""

import pytest

from services.decoder import DecodeError
from services.scoring_service import ScoringService


@pytest.mark.asyncio
async def test_score_wer():
    """One substitution in three reference words."""
    result = await ScoringService().score_wer(
        {"u1": ["a", "b", "c"]}, {"u1": ["a", "x", "c"]}
    )

    assert result["wer"] == pytest.approx(1 / 3)
    assert result["utterances"] == 1
    assert result["reference_words"] == 3


@pytest.mark.asyncio
async def test_score_tse_in_milliseconds():
    """Boundary errors are scaled by frame length and stride."""
    refs = {"u1": [("ab", 0, 4), ("ba", 5, 8)]}
    hyps = {"u1": [("ab", 1, 4), ("ba", 5, 9)]}

    result = await ScoringService().score_tse(refs, hyps, frame_ms=10.0, stride=2)

    assert result["tse_ms"] == pytest.approx(10.0)


@pytest.mark.asyncio
async def test_score_tse_without_correct_words():
    """No correct word means no time-stamp error."""
    result = await ScoringService().score_tse(
        {"u1": [("ab", 0, 4)]}, {"u1": [("ba", 0, 4)]}, 10.0, 1
    )

    assert result["tse_ms"] is None


@pytest.mark.asyncio
async def test_missing_hypothesis_is_an_error():
    """Every reference utterance needs a hypothesis."""
    with pytest.raises(DecodeError, match="u2"):
        await ScoringService().score_wer({"u2": ["a"]}, {})
