"""
Decoding endpoints module.

Exposes the configured decode graph and checkpoint over HTTP. Clients send
either per-frame unit logits or raw features for one utterance.
"""

from typing import List, Optional

import numpy as np
from fastapi import APIRouter, Depends, HTTPException, status
from pydantic import BaseModel, Field, model_validator

from core.errors import HybridAmError
from core.logging import get_logger
from services.decoding_service import DecodingService, DecodingServiceError

router = APIRouter()
logger = get_logger(__name__)


class DecodeRequest(BaseModel):
    utt_id: str = "request"
    logits: Optional[List[List[float]]] = None
    features: Optional[List[List[float]]] = None
    beam: float = Field(default=16.0, gt=0)

    @model_validator(mode="after")
    def exactly_one_input(self) -> "DecodeRequest":
        if (self.logits is None) == (self.features is None):
            raise ValueError("send exactly one of 'logits' or 'features'")
        rows = self.logits if self.logits is not None else self.features
        if rows and len({len(row) for row in rows}) > 1:
            raise ValueError("all frames must have the same width")
        return self


class DecodeResponse(BaseModel):
    utt_id: str
    text: str
    words: List[str]
    word_times: List[List[int]]
    score: float


def get_decoding_service() -> DecodingService:
    """Dependency injection for the decoding service."""
    return DecodingService()


@router.get("/info")
async def get_model_info(
    service: DecodingService = Depends(get_decoding_service),
) -> dict:
    """Describe the served system."""
    try:
        return await service.get_model_info()
    except DecodingServiceError as e:
        logger.error(f"Decoding service unavailable: {e}")
        raise HTTPException(
            status_code=status.HTTP_503_SERVICE_UNAVAILABLE, detail=str(e)
        ) from e


@router.post("/", response_model=DecodeResponse)
async def decode(
    request: DecodeRequest,
    service: DecodingService = Depends(get_decoding_service),
) -> DecodeResponse:
    """
    Decode one utterance.

    Raises:
        HTTPException: 503 when no system is configured, 422 when the input
            does not fit the served system.
    """
    logits = np.asarray(request.logits) if request.logits is not None else None
    features = np.asarray(request.features) if request.features is not None else None
    try:
        hyp = await service.decode(logits=logits, features=features, beam=request.beam)
    except DecodingServiceError as e:
        logger.error(f"Decoding service unavailable: {e}")
        raise HTTPException(
            status_code=status.HTTP_503_SERVICE_UNAVAILABLE, detail=str(e)
        ) from e
    except HybridAmError as e:
        logger.warning(
            "decode request rejected",
            extra={"extra_fields": {"utt_id": request.utt_id, "reason": str(e)}},
        )
        raise HTTPException(
            status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=str(e)
        ) from e
    except Exception as e:
        logger.exception("Unexpected error in decode endpoint")
        raise HTTPException(
            status_code=status.HTTP_500_INTERNAL_SERVER_ERROR,
            detail="Failed to decode utterance",
        ) from e
    return DecodeResponse(
        utt_id=request.utt_id,
        text=" ".join(hyp.words),
        words=list(hyp.words),
        word_times=[[start, end] for start, end in hyp.word_times],
        score=hyp.score,
    )
