"""
Sequence objectives over numerator and denominator graphs.

All marginalization runs in the natural-log domain over arc arrays: one
``np.logaddexp.at`` scatter per frame for the forward pass, one gather per
frame for the backward pass. Every emitting arc consumes exactly one frame.
"""

from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.special import log_softmax, logsumexp, softmax

from core.errors import HybridAmError
from core.logging import get_logger
from services.wfst import EPSILON, Fst

logger = get_logger(__name__)

LossMode = Literal["mmi", "ml", "ce"]
PRIOR_FLOOR = 1e-8


class LossError(HybridAmError):
    """Raised when an objective cannot be evaluated."""

    pass


class NumeratorError(LossError):
    """Raised when the numerator has no path of the utterance's length."""

    pass


class DivergenceError(LossError):
    """Raised on non-finite scores or objectives."""

    pass


class LossConfig(BaseModel):
    """Acoustic scale, boost, optional log priors and objective."""

    model_config = ConfigDict(frozen=True)

    kappa: float = Field(default=1.0, gt=0.0)
    boost: float = Field(default=0.0, ge=0.0)
    log_priors: Optional[tuple[float, ...]] = None
    mode: LossMode = "mmi"

    @field_validator("log_priors")
    @classmethod
    def check_priors(
        cls, v: Optional[tuple[float, ...]]
    ) -> Optional[tuple[float, ...]]:
        """Log priors must describe a distribution."""
        if v is None:
            return v
        total = float(logsumexp(np.asarray(v, dtype=np.float64)))
        if abs(total) > 1e-6:
            raise ValueError(f"log priors must log-sum-exp to 0, got {total}")
        return v


@dataclass
class LossResult:
    objective: float
    grad: np.ndarray
    num_post: Optional[np.ndarray]
    maximize: bool = True

    @property
    def frames(self) -> int:
        return int(self.grad.shape[0])


@dataclass(frozen=True)
class GraphArrays:
    """Arc-array view of an input-epsilon-free graph."""

    num_states: int
    start: int
    src: np.ndarray
    dst: np.ndarray
    units: np.ndarray
    olabels: np.ndarray
    weights: np.ndarray
    finals: np.ndarray

    @classmethod
    def from_fst(cls, fst: Fst) -> "GraphArrays":
        if fst.is_empty():
            raise LossError("graph is empty")
        assert fst.start is not None
        arcs = list(fst.iter_arcs())
        if any(arc.ilabel == EPSILON for arc in arcs):
            raise LossError(
                "graph has input epsilons; remove them before marginalizing"
            )
        finals = np.full(fst.num_states, -np.inf)
        for state, weight in fst.finals.items():
            finals[state] = weight
        return cls(
            num_states=fst.num_states,
            start=fst.start,
            src=np.array([a.src for a in arcs], dtype=np.int64),
            dst=np.array([a.dst for a in arcs], dtype=np.int64),
            units=np.array([a.ilabel - 1 for a in arcs], dtype=np.int64),
            olabels=np.array([a.olabel for a in arcs], dtype=np.int64),
            weights=np.array([a.weight for a in arcs], dtype=np.float64),
            finals=finals,
        )


Graph = Union[Fst, GraphArrays]


def _arrays(graph: Graph) -> GraphArrays:
    return graph if isinstance(graph, GraphArrays) else GraphArrays.from_fst(graph)


def _check_scores(scores: np.ndarray) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 1:
        raise LossError(
            f"scores must be a T x U matrix with T >= 1, got shape {scores.shape}"
        )
    finite = np.isfinite(scores).all(axis=1)
    if not finite.all():
        frame = int(np.argmin(finite))
        raise DivergenceError(f"non-finite score at frame {frame}")
    return scores


def adjust_scores(logits: np.ndarray, cfg: LossConfig) -> np.ndarray:
    """kappa * (logits - log_priors); the only place kappa and priors enter."""
    logits = np.asarray(logits, dtype=np.float64)
    if cfg.log_priors is None:
        return cfg.kappa * logits
    priors = np.asarray(cfg.log_priors, dtype=np.float64)
    if priors.shape[0] != logits.shape[1]:
        raise LossError(f"{priors.shape[0]} log priors for {logits.shape[1]} units")
    return cfg.kappa * (logits - priors)


def forward_backward(
    graph: Graph,
    scores: np.ndarray,
    cfg: Optional[LossConfig] = None,
    frame_bonus: Optional[np.ndarray] = None,
) -> tuple[float, np.ndarray]:
    """
    Log total over all length-T paths and the per-frame unit occupancies.

    ``scores`` are adjusted through ``cfg`` first when given. Arc (t, unit)
    emissions add ``frame_bonus[t, unit]`` when a bonus is given.

    Raises:
        LossError: If no path of length T exists.
        DivergenceError: If scores are not finite.
    """
    arrays = _arrays(graph)
    scores = _check_scores(adjust_scores(scores, cfg) if cfg is not None else scores)
    frames, width = scores.shape
    if arrays.units.size and int(arrays.units.max()) >= width:
        raise LossError(
            f"graph unit {int(arrays.units.max())} outside score width {width}"
        )
    if frame_bonus is not None:
        if frame_bonus.shape != scores.shape:
            raise LossError(
                f"bonus shape {frame_bonus.shape} != score shape {scores.shape}"
            )
        scores = scores + frame_bonus

    emit = arrays.weights[None, :] + scores[:, arrays.units]
    alpha = np.full((frames + 1, arrays.num_states), -np.inf)
    alpha[0, arrays.start] = 0.0
    for t in range(frames):
        np.logaddexp.at(alpha[t + 1], arrays.dst, alpha[t, arrays.src] + emit[t])
    log_total = float(logsumexp(alpha[frames] + arrays.finals))
    if log_total == -np.inf:
        raise LossError(f"no path of length {frames} through the graph")
    if not np.isfinite(log_total):
        raise DivergenceError(f"non-finite total after {frames} frames")

    beta = np.full((frames + 1, arrays.num_states), -np.inf)
    beta[frames] = arrays.finals
    occupancy = np.zeros((frames, width))
    for t in range(frames - 1, -1, -1):
        through = emit[t] + beta[t + 1, arrays.dst]
        np.logaddexp.at(beta[t], arrays.src, through)
        posterior = np.exp(alpha[t, arrays.src] + through - log_total)
        np.add.at(occupancy[t], arrays.units, posterior)
    return log_total, occupancy


def lfbmmi_loss(
    num: Graph, den: Graph, logits: np.ndarray, cfg: LossConfig
) -> LossResult:
    """
    Boosted lattice-free MMI of one utterance.

    The numerator pass runs first; its occupancies, scaled by ``-boost``,
    are added to the denominator's per-frame scores and treated as
    constants for the gradient.

    Raises:
        NumeratorError: If the numerator has no path of length T.
        DivergenceError: If the objective is not finite.
    """
    if cfg.mode != "mmi":
        raise LossError(f"lfbmmi_loss needs mode 'mmi', got '{cfg.mode}'")
    adjusted = adjust_scores(logits, cfg)
    try:
        log_num, num_post = forward_backward(num, adjusted)
    except DivergenceError:
        raise
    except LossError as e:
        raise NumeratorError(str(e)) from e
    bonus = -cfg.boost * num_post if cfg.boost > 0 else None
    log_den, den_post = forward_backward(den, adjusted, frame_bonus=bonus)
    objective = log_num - log_den
    if not np.isfinite(objective):
        raise DivergenceError(f"non-finite MMI objective {objective}")
    grad = cfg.kappa * (num_post - den_post)
    return LossResult(objective, grad, num_post, maximize=True)


def ml_loss(
    num: Graph, logits: np.ndarray, cfg: Optional[LossConfig] = None
) -> LossResult:
    """
    Numerator log-likelihood of per-frame log-softmax outputs.

    With a CTC numerator this is the CTC criterion. An HMM1 numerator with
    adjacent repeated labels counts every split of a run as its own path, so
    the value is a path sum rather than a likelihood and can exceed 0.
    """
    if cfg is not None and cfg.mode != "ml":
        raise LossError(f"ml_loss needs mode 'ml', got '{cfg.mode}'")
    logits = _check_scores(logits)
    log_probs = log_softmax(logits, axis=1)
    try:
        log_num, num_post = forward_backward(num, log_probs)
    except DivergenceError:
        raise
    except LossError as e:
        raise NumeratorError(str(e)) from e
    grad = num_post - softmax(logits, axis=1) * num_post.sum(axis=1, keepdims=True)
    return LossResult(log_num, grad, num_post, maximize=True)


def ce_loss(alignment: Sequence[int], logits: np.ndarray) -> LossResult:
    """Mean per-frame negative log-softmax of the aligned units (minimized)."""
    logits = _check_scores(logits)
    frames, width = logits.shape
    targets = np.asarray(alignment, dtype=np.int64)
    if targets.shape != (frames,):
        raise LossError(
            f"alignment has {targets.shape[0]} frames, logits have {frames}"
        )
    if targets.min() < 0 or targets.max() >= width:
        bad = int(targets[(targets < 0) | (targets >= width)][0])
        raise LossError(f"aligned unit {bad} outside 0..{width - 1}")
    log_probs = log_softmax(logits, axis=1)
    onehot = np.zeros_like(logits)
    onehot[np.arange(frames), targets] = 1.0
    objective = float(-log_probs[np.arange(frames), targets].mean())
    grad = (softmax(logits, axis=1) - onehot) / frames
    return LossResult(objective, grad, onehot, maximize=False)


def estimate_priors(
    subset: Sequence[np.ndarray], num_units: Optional[int] = None
) -> np.ndarray:
    """
    Log unit priors: mean softmax posterior over every frame of ``subset``.

    Priors are floored at 1e-8 and renormalized.
    """
    if not subset:
        raise LossError("prior estimation needs at least one utterance")
    width = num_units if num_units is not None else subset[0].shape[1]
    total = np.zeros(width)
    frames = 0
    for logits in subset:
        logits = _check_scores(logits)
        if logits.shape[1] != width:
            raise LossError(f"logit width {logits.shape[1]} != {width} units")
        total += softmax(logits, axis=1).sum(axis=0)
        frames += logits.shape[0]
    priors = np.maximum(total / frames, PRIOR_FLOOR)
    priors /= priors.sum()
    logger.info(
        "priors estimated",
        extra={"extra_fields": {"utterances": len(subset), "frames": frames}},
    )
    return np.log(priors)
