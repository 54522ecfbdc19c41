"""
Scoring endpoints module.
"""

from typing import Dict, List

from fastapi import APIRouter, Depends, HTTPException, status
from pydantic import BaseModel, Field

from core.errors import HybridAmError
from core.logging import get_logger
from services.scoring_service import ScoringService

router = APIRouter()
logger = get_logger(__name__)


class WerRequest(BaseModel):
    refs: Dict[str, List[str]]
    hyps: Dict[str, List[str]]


class TimedWord(BaseModel):
    word: str
    start: int = Field(ge=0)
    end: int = Field(ge=0)


class TseRequest(BaseModel):
    refs: Dict[str, List[TimedWord]]
    hyps: Dict[str, List[TimedWord]]
    frame_ms: float = Field(default=10.0, gt=0)
    stride: int = Field(default=1, ge=1)


def get_scoring_service() -> ScoringService:
    """Dependency injection for the scoring service."""
    return ScoringService()


def _timed(words: List[TimedWord]) -> list[tuple[str, int, int]]:
    return [(w.word, w.start, w.end) for w in words]


@router.post("/wer")
async def score_wer(
    request: WerRequest, service: ScoringService = Depends(get_scoring_service)
) -> dict:
    """Word error rate of hypotheses against references."""
    try:
        return await service.score_wer(request.refs, request.hyps)
    except HybridAmError as e:
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=str(e)
        ) from e


@router.post("/tse")
async def score_tse(
    request: TseRequest, service: ScoringService = Depends(get_scoring_service)
) -> dict:
    """Time-stamp error of correctly recognized words, in milliseconds."""
    refs = {utt_id: _timed(words) for utt_id, words in request.refs.items()}
    hyps = {utt_id: _timed(words) for utt_id, words in request.hyps.items()}
    try:
        return await service.score_tse(refs, hyps, request.frame_ms, request.stride)
    except HybridAmError as e:
        logger.warning(f"TSE request rejected: {e}")
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=str(e)
        ) from e
