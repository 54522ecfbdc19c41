"""
Training driver.

A two-layer tanh perceptron scores stacked feature frames; utterances are
batched in id order, padded to the longest member, and their losses are
evaluated on a thread pool. Parameter updates happen on the calling thread
between batches. Schedules chain a pre-training stage (ML or CE) with LF-MMI;
at the handoff log priors are estimated on the first utterances and the
acoustic scale is taken from the config.
"""

import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from core.config import PipelineConfig
from core.errors import HybridAmError
from core.logging import get_logger
from services.corpus import Utterance
from services.graphs import DenGraph
from services.loss import (
    DivergenceError,
    GraphArrays,
    LossConfig,
    LossError,
    LossResult,
    ce_loss,
    estimate_priors,
    lfbmmi_loss,
    ml_loss,
)
from services.topology import Segment, TopologyError, TopologySpec, expand_durations
from services.units import UnitInventory
from services.wfst import Fst

logger = get_logger(__name__)

CHECKPOINT_MAGIC = b"LFCK"
CHECKPOINT_VERSION = 1
# magic, version, units, hidden, feature dim, stride, epoch, kappa, has priors,
# stage, config hash
_CHECKPOINT_HEADER = struct.Struct("<4sIIIIIIdI8s16s")
_PARAMS = np.dtype("<f8")

OBJECTIVE_LOG_HEADER = "stage\tepoch\tobjective\tframes\tskipped"


class TrainingError(HybridAmError):
    """Raised when training cannot start or has to stop."""

    def __init__(self, message: str, checkpoint: Optional["Checkpoint"] = None) -> None:
        super().__init__(message)
        self.checkpoint = checkpoint


# ----------------------------------------------------------------------
# Feature transforms
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class SpecAugmentPolicy:
    freq_width: int
    n_freq_masks: int
    time_width: int
    n_time_masks: int
    max_time_fraction: float = 0.2

    def __post_init__(self) -> None:
        widths = (
            self.freq_width,
            self.n_freq_masks,
            self.time_width,
            self.n_time_masks,
        )
        if min(widths) < 0:
            raise TrainingError(f"mask sizes must be non-negative: {self}")
        if not 0.0 <= self.max_time_fraction <= 1.0:
            raise TrainingError(f"time fraction must lie in [0, 1]: {self}")


LD = SpecAugmentPolicy(freq_width=27, n_freq_masks=2, time_width=100, n_time_masks=2)
LARGE = SpecAugmentPolicy(freq_width=27, n_freq_masks=2, time_width=30, n_time_masks=10)
POLICIES: dict[str, Optional[SpecAugmentPolicy]] = {
    "none": None,
    "ld": LD,
    "large": LARGE,
}


def spec_augment(
    features: np.ndarray,
    policy: Optional[SpecAugmentPolicy],
    seed: "int | Sequence[int] | np.random.Generator",
) -> np.ndarray:
    """
    Zero sampled frequency bands and time spans.

    Time masks together never cover more than ``max_time_fraction`` of the
    input frames. The input is left untouched.
    """
    if policy is None:
        return features
    rng = np.random.default_rng(seed)
    out = features.copy()
    frames, dim = out.shape
    for _ in range(policy.n_freq_masks):
        width = int(rng.integers(0, min(policy.freq_width, dim) + 1))
        f0 = int(rng.integers(0, dim - width + 1))
        out[:, f0 : f0 + width] = 0.0
    budget = int(math.floor(policy.max_time_fraction * frames))
    for _ in range(policy.n_time_masks):
        width = min(int(rng.integers(0, policy.time_width + 1)), budget)
        t0 = int(rng.integers(0, frames - width + 1))
        out[t0 : t0 + width] = 0.0
        budget -= width
    return out


def frame_stride(features: np.ndarray, stride: int) -> np.ndarray:
    """Concatenate every ``stride`` input frames; a trailing remainder is dropped."""
    if stride < 1:
        raise TrainingError(f"stride must be >= 1, got {stride}")
    frames, dim = features.shape
    if frames < stride:
        raise TrainingError(f"{frames} input frames are fewer than the stride {stride}")
    out_frames = frames // stride
    return features[: out_frames * stride].reshape(out_frames, stride * dim)


# ----------------------------------------------------------------------
# Scorer
# ----------------------------------------------------------------------


@dataclass
class ToyScorer:
    """stride*F -> tanh hidden -> U logits."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    stride: int

    @classmethod
    def initialize(
        cls, feat_dim: int, hidden: int, num_units: int, stride: int, seed: int
    ) -> "ToyScorer":
        rng = np.random.default_rng(seed)
        input_dim = stride * feat_dim
        return cls(
            w1=rng.normal(0.0, 1.0 / math.sqrt(input_dim), size=(input_dim, hidden)),
            b1=np.zeros(hidden),
            w2=rng.normal(0.0, 1.0 / math.sqrt(hidden), size=(hidden, num_units)),
            b2=np.zeros(num_units),
            stride=stride,
        )

    @property
    def feat_dim(self) -> int:
        return self.w1.shape[0] // self.stride

    @property
    def hidden(self) -> int:
        return self.w1.shape[1]

    @property
    def num_units(self) -> int:
        return self.w2.shape[1]

    def parameters(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def forward(self, inputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Logits and hidden activations of stacked inputs (any leading shape)."""
        hidden = np.tanh(inputs @ self.w1 + self.b1)
        return hidden @ self.w2 + self.b2, hidden

    def logits(self, features: np.ndarray) -> np.ndarray:
        return self.forward(frame_stride(features, self.stride))[0]

    def gradients(
        self, inputs: np.ndarray, hidden: np.ndarray, grad_logits: np.ndarray
    ) -> dict[str, np.ndarray]:
        x = inputs.reshape(-1, inputs.shape[-1])
        h = hidden.reshape(-1, hidden.shape[-1])
        g = grad_logits.reshape(-1, grad_logits.shape[-1])
        dz = (g @ self.w2.T) * (1.0 - h**2)
        return {
            "w1": x.T @ dz,
            "b1": dz.sum(axis=0),
            "w2": h.T @ g,
            "b2": g.sum(axis=0),
        }

    def step(
        self,
        grads: Mapping[str, np.ndarray],
        learning_rate: float,
        clip_norm: float,
        sign: float,
    ) -> float:
        """Apply one clipped update; returns the gradient norm before clipping."""
        norm = math.sqrt(sum(float(np.sum(g**2)) for g in grads.values()))
        scale = clip_norm / norm if norm > clip_norm else 1.0
        for name, param in self.parameters().items():
            param += sign * learning_rate * scale * grads[name]
        if not all(np.isfinite(p).all() for p in self.parameters().values()):
            raise DivergenceError("parameters became non-finite after an update")
        return norm


# ----------------------------------------------------------------------
# Checkpoints
# ----------------------------------------------------------------------


@dataclass
class Checkpoint:
    scorer: ToyScorer
    stage: str
    epoch: int
    kappa: float = 1.0
    log_priors: Optional[np.ndarray] = None
    config_hash: str = ""

    def loss_config(self, boost: float = 0.0) -> LossConfig:
        priors = None
        if self.log_priors is not None:
            priors = tuple(float(v) for v in self.log_priors)
        return LossConfig(kappa=self.kappa, boost=boost, log_priors=priors, mode="mmi")


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    scorer = ckpt.scorer
    header = _CHECKPOINT_HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        scorer.num_units,
        scorer.hidden,
        scorer.feat_dim,
        scorer.stride,
        ckpt.epoch,
        ckpt.kappa,
        int(ckpt.log_priors is not None),
        ckpt.stage.encode("ascii"),
        ckpt.config_hash.encode("ascii"),
    )
    arrays = [scorer.w1, scorer.b1, scorer.w2, scorer.b2]
    if ckpt.log_priors is not None:
        arrays.append(ckpt.log_priors)
    payload = b"".join(
        np.ascontiguousarray(a, dtype=_PARAMS).tobytes() for a in arrays
    )
    return header + payload


def decode_checkpoint(data: bytes) -> Checkpoint:
    """
    Parse an ``LFCK`` checkpoint.

    Raises:
        TrainingError: On a bad magic, an unknown version or a size mismatch.
    """
    if len(data) < _CHECKPOINT_HEADER.size or data[:4] != CHECKPOINT_MAGIC:
        raise TrainingError("not a checkpoint file (missing LFCK magic)")
    (
        _,
        version,
        units,
        hidden,
        feat_dim,
        stride,
        epoch,
        kappa,
        has_priors,
        stage,
        digest,
    ) = _CHECKPOINT_HEADER.unpack_from(data)
    if version != CHECKPOINT_VERSION:
        raise TrainingError(f"checkpoint version {version} is not supported")
    input_dim = stride * feat_dim
    shapes = [(input_dim, hidden), (hidden,), (hidden, units), (units,)]
    if has_priors:
        shapes.append((units,))
    values = sum(int(np.prod(s)) for s in shapes)
    expected = _CHECKPOINT_HEADER.size + values * _PARAMS.itemsize
    if len(data) != expected:
        raise TrainingError(
            f"checkpoint holds {len(data)} bytes, header promises {expected}"
        )
    arrays = []
    offset = _CHECKPOINT_HEADER.size
    for shape in shapes:
        count = int(np.prod(shape))
        values = np.frombuffer(data, dtype=_PARAMS, count=count, offset=offset)
        arrays.append(values.reshape(shape).astype(np.float64))
        offset += count * _PARAMS.itemsize
    scorer = ToyScorer(arrays[0], arrays[1], arrays[2], arrays[3], stride)
    return Checkpoint(
        scorer=scorer,
        stage=stage.rstrip(b"\0").decode("ascii"),
        epoch=epoch,
        kappa=kappa,
        log_priors=arrays[4] if has_priors else None,
        config_hash=digest.rstrip(b"\0").decode("ascii"),
    )


# ----------------------------------------------------------------------
# Batching and objectives
# ----------------------------------------------------------------------


@dataclass
class Batch:
    utt_ids: list[str]
    inputs: np.ndarray
    lengths: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return np.arange(self.inputs.shape[1])[None, :] < self.lengths[:, None]

    @property
    def frames(self) -> int:
        return int(self.lengths.sum())


def pad_batch(utt_ids: Sequence[str], stacked: Sequence[np.ndarray]) -> Batch:
    """Pad stacked inputs to the longest one; padded frames are zero."""
    lengths = np.array([s.shape[0] for s in stacked], dtype=np.int64)
    inputs = np.zeros((len(stacked), int(lengths.max()), stacked[0].shape[1]))
    for b, s in enumerate(stacked):
        inputs[b, : s.shape[0]] = s
    return Batch(list(utt_ids), inputs, lengths)


def batch_logits(
    scorer: ToyScorer, batch: Batch
) -> tuple[list[np.ndarray], np.ndarray]:
    """Per-utterance logits (valid frames only) and the padded hidden layer."""
    logits, hidden = scorer.forward(batch.inputs)
    return [logits[b, :length] for b, length in enumerate(batch.lengths)], hidden


def ce_targets(
    segments: Sequence[Segment], spec: TopologySpec, inv: UnitInventory
) -> np.ndarray:
    """
    Frame targets from labelled segments.

    Chain segments start on the base unit. CTC segments emit their label on
    the first frame and Blank on the rest, so repeated labels stay apart.
    """
    frames: list[int] = []
    for segment in segments:
        duration = segment.end - segment.start
        if segment.unit == inv.blank_id:
            frames.extend([segment.unit] * duration)
        elif spec.kind == "ctc":
            if inv.blank_id is None:
                raise TopologyError("CTC frame targets need a Blank unit")
            frames.extend([segment.unit] + [inv.blank_id] * (duration - 1))
        else:
            frames.extend(expand_durations([segment.unit], [duration], spec, inv))
    return np.array(frames, dtype=np.int64)


@dataclass
class StageObjective:
    """Per-utterance loss of one training stage."""

    mode: str
    loss_cfg: LossConfig
    nums: Mapping[str, GraphArrays] = field(default_factory=dict)
    den: Optional[GraphArrays] = None
    targets: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __call__(self, utt_id: str, logits: np.ndarray) -> LossResult:
        if self.mode == "ce":
            if utt_id not in self.targets:
                raise LossError("no frame targets")
            return ce_loss(self.targets[utt_id], logits)
        if utt_id not in self.nums:
            raise LossError("no numerator graph")
        if self.mode == "ml":
            return ml_loss(self.nums[utt_id], logits)
        assert self.den is not None
        return lfbmmi_loss(self.nums[utt_id], self.den, logits, self.loss_cfg)


@dataclass
class ObjectiveRow:
    stage: str
    epoch: int
    objective: float
    frames: int
    skipped: int

    def to_tsv(self) -> str:
        return (
            f"{self.stage}\t{self.epoch}\t{self.objective:.6f}"
            f"\t{self.frames}\t{self.skipped}"
        )


def write_objective_log(rows: Sequence[ObjectiveRow]) -> str:
    return "\n".join([OBJECTIVE_LOG_HEADER, *(row.to_tsv() for row in rows)]) + "\n"


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    rows: list[ObjectiveRow]


def schedule_stages(config: PipelineConfig) -> list[tuple[str, int]]:
    """(stage, epochs) pairs of the configured schedule."""
    schedule = config.effective_schedule
    if schedule == "mmi":
        return [("mmi", config.mmi_epochs)]
    if schedule in ("ml", "ce"):
        return [(schedule, config.pretrain_epochs)]
    pretrain, _ = schedule.split("-")
    return [(pretrain, config.pretrain_epochs), ("mmi", config.mmi_epochs)]


def evaluate_utterances(
    objective: Callable[[str, np.ndarray], LossResult],
    items: Sequence[tuple[str, np.ndarray]],
    pool: Optional[ThreadPoolExecutor] = None,
) -> list[Optional[LossResult]]:
    """
    Losses of (utt_id, logits) pairs in input order; ``None`` marks a skip.

    Utterances whose numerator has no path or whose targets do not fit are
    skipped with a warning. Divergence propagates.
    """

    def one(item: tuple[str, np.ndarray]) -> Optional[LossResult]:
        utt_id, logits = item
        try:
            return objective(utt_id, logits)
        except DivergenceError as e:
            raise DivergenceError(f"utterance {utt_id}: {e}") from e
        except LossError as e:
            logger.warning(
                "utterance skipped",
                extra={"extra_fields": {"utt_id": utt_id, "reason": str(e)}},
            )
            return None

    if pool is None:
        return [one(item) for item in items]
    return list(pool.map(one, items))


def compile_graphs(graphs: Mapping[str, Fst]) -> dict[str, GraphArrays]:
    """Arc arrays per utterance; graphs that cannot be compiled are skipped."""
    compiled = {}
    for utt_id, fst in graphs.items():
        try:
            compiled[utt_id] = GraphArrays.from_fst(fst)
        except LossError as e:
            logger.warning(
                "utterance skipped",
                extra={"extra_fields": {"utt_id": utt_id, "reason": str(e)}},
            )
    return compiled


def train(
    corpus: Sequence[Utterance],
    config: PipelineConfig,
    inv: UnitInventory,
    nums: Mapping[str, Fst],
    den: Optional[DenGraph] = None,
    segments: Optional[Mapping[str, Sequence[Segment]]] = None,
    workers: int = 1,
    checkpoint_dir: Optional[Path] = None,
) -> TrainResult:
    """
    Run the configured schedule and return the final checkpoint.

    ``segments`` hold per-utterance unit segments at the output frame rate
    and are needed by CE stages. A checkpoint is written to
    ``checkpoint_dir`` after every epoch when a directory is given.

    Raises:
        TrainingError: On missing inputs, or on divergence (carrying the last
            good checkpoint).
    """
    if not corpus:
        raise TrainingError("training corpus is empty")
    stages = schedule_stages(config)
    modes = {stage for stage, _ in stages}
    if "mmi" in modes and den is None:
        raise TrainingError("MMI training needs a denominator graph")
    if "ce" in modes and not segments:
        raise TrainingError(
            f"schedule {config.effective_schedule} needs frame alignments"
        )
    if den is not None and den.topology != config.topology:
        raise TrainingError(f"denominator topology {den.topology} != {config.topology}")

    utterances = sorted(corpus, key=lambda u: u.utt_id)
    feat_dim = utterances[0].features.shape[1]
    stride = config.effective_stride
    scorer = ToyScorer.initialize(
        feat_dim, config.hidden, inv.size, stride, config.seed
    )
    policy = POLICIES[config.specaugment]
    spec = TopologySpec(config.topology)

    num_arrays = compile_graphs(nums)
    den_arrays = GraphArrays.from_fst(den.fst) if den is not None else None
    targets: dict[str, np.ndarray] = {}
    for utt_id, segs in (segments or {}).items():
        try:
            targets[utt_id] = ce_targets(segs, spec, inv)
        except TopologyError as e:
            logger.warning(
                "utterance skipped",
                extra={"extra_fields": {"utt_id": utt_id, "reason": str(e)}},
            )

    rows: list[ObjectiveRow] = []
    checkpoint = Checkpoint(
        _copy_scorer(scorer), stages[0][0], 0, config.kappa, None, config.config_hash()
    )
    loss_cfg = LossConfig(kappa=config.kappa, boost=config.boost)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for stage_index, (stage, epochs) in enumerate(stages):
            if stage == "mmi" and stage_index > 0:
                subset = utterances[: config.prior_subset]
                log_priors = estimate_priors(
                    [scorer.logits(u.features) for u in subset], inv.size
                )
                loss_cfg = LossConfig(
                    kappa=config.kappa,
                    boost=config.boost,
                    log_priors=tuple(float(v) for v in log_priors),
                )
                checkpoint.log_priors = log_priors
                logger.info(
                    "stage handoff",
                    extra={
                        "extra_fields": {
                            "stage": stage,
                            "kappa": config.kappa,
                            "prior_utterances": len(subset),
                        }
                    },
                )
            objective = StageObjective(stage, loss_cfg, num_arrays, den_arrays, targets)
            for epoch in range(1, epochs + 1):
                try:
                    row = _run_epoch(
                        scorer,
                        objective,
                        utterances,
                        config,
                        policy,
                        (stage_index, epoch),
                        pool,
                    )
                except DivergenceError as e:
                    raise TrainingError(
                        f"training diverged in {stage} epoch {epoch}: {e}", checkpoint
                    ) from e
                rows.append(row)
                checkpoint = Checkpoint(
                    _copy_scorer(scorer),
                    stage,
                    epoch,
                    config.kappa,
                    checkpoint.log_priors,
                    config.config_hash(),
                )
                if checkpoint_dir is not None:
                    path = checkpoint_dir / f"{stage}-{epoch:03d}.ckpt"
                    path.write_bytes(encode_checkpoint(checkpoint))
                logger.info(
                    "epoch finished",
                    extra={
                        "extra_fields": {
                            "stage": stage,
                            "epoch": epoch,
                            "objective": row.objective,
                            "frames": row.frames,
                            "skipped": row.skipped,
                        }
                    },
                )
    return TrainResult(checkpoint, rows)


def _copy_scorer(scorer: ToyScorer) -> ToyScorer:
    return ToyScorer(
        scorer.w1.copy(),
        scorer.b1.copy(),
        scorer.w2.copy(),
        scorer.b2.copy(),
        scorer.stride,
    )


def _run_epoch(
    scorer: ToyScorer,
    objective: StageObjective,
    utterances: Sequence[Utterance],
    config: PipelineConfig,
    policy: Optional[SpecAugmentPolicy],
    position: tuple[int, int],
    pool: ThreadPoolExecutor,
) -> ObjectiveRow:
    total = 0.0
    frames = 0
    skipped = 0
    maximize = objective.mode != "ce"
    for first in range(0, len(utterances), config.batch_size):
        members = utterances[first : first + config.batch_size]
        stacked = [
            frame_stride(
                spec_augment(u.features, policy, [config.seed, *position, first + k]),
                scorer.stride,
            )
            for k, u in enumerate(members)
        ]
        batch = pad_batch([u.utt_id for u in members], stacked)
        logits, hidden = batch_logits(scorer, batch)
        results = evaluate_utterances(objective, list(zip(batch.utt_ids, logits)), pool)

        grad = np.zeros(hidden.shape[:2] + (scorer.num_units,))
        batch_frames = 0
        for b, result in enumerate(results):
            if result is None:
                skipped += 1
                continue
            # CE reports a per-frame mean; rescale to a sum like the sequence losses
            weight = result.frames if not result.maximize else 1.0
            grad[b, : result.frames] = weight * result.grad
            total += weight * result.objective
            batch_frames += result.frames
        if batch_frames == 0:
            continue
        frames += batch_frames
        grads = scorer.gradients(batch.inputs, hidden, grad / batch_frames)
        sign = 1.0 if maximize else -1.0
        scorer.step(grads, config.learning_rate, config.clip_norm, sign)
    objective_per_frame = total / frames if frames else float("nan")
    return ObjectiveRow(
        objective.mode, position[1], objective_per_frame, frames, skipped
    )
