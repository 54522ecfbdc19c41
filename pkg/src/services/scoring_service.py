"""
Scoring service module.

Word error rate and time-stamp error for JSON clients; the arithmetic is
shared with the ``score`` subcommand.
"""

from typing import Mapping, Optional, Sequence

from services.decoder import Hypothesis, tse, wer


class ScoringService:
    """Stateless WER / TSE computation."""

    async def score_wer(
        self, refs: Mapping[str, Sequence[str]], hyps: Mapping[str, Sequence[str]]
    ) -> dict:
        return {
            "wer": wer(refs, hyps),
            "utterances": len(refs),
            "reference_words": sum(len(words) for words in refs.values()),
        }

    async def score_tse(
        self,
        refs: Mapping[str, Sequence[tuple[str, int, int]]],
        hyps: Mapping[str, Sequence[tuple[str, int, int]]],
        frame_ms: float,
        stride: int,
    ) -> dict:
        """Mean absolute boundary error of correctly recognized words, in ms."""
        timed = {
            utt_id: Hypothesis(
                tuple(w for w, _, _ in words), tuple((s, e) for _, s, e in words), 0.0
            )
            for utt_id, words in hyps.items()
        }
        error: Optional[float] = tse(refs, timed, frame_ms, stride)
        return {"tse_ms": error, "utterances": len(refs)}
