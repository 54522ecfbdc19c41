"""
Pipeline configuration.

A pipeline config is a flat ``key = value`` UTF-8 file with bracketed section
headers used only for grouping; every key lives in one namespace. The loaded
values are validated by ``PipelineConfig`` which also gates the supported
unit-type x topology cells before any work starts.
"""

import configparser
import hashlib
import math
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from core.errors import ConfigError

UnitType = Literal["mono-char", "bi-char", "chenone", "wordpiece"]
TopologyKind = Literal["ctc", "hmm1", "chain"]
SpecAugmentName = Literal["none", "ld", "large"]
Schedule = Literal["ml", "ce", "mmi", "ml-mmi", "ce-mmi"]
DenLmSilence = Literal["random", "alignment"]

SHORT_NAMES = {"mono-char": "mc", "bi-char": "bc", "chenone": "ch", "wordpiece": "wp"}

# Unit inventory budgets used when a config does not override them.
DEFAULT_BICHAR_UNITS = 870
DEFAULT_WORDPIECES = 511
DEFAULT_CHENONES = 1632


class PipelineConfig(BaseModel):
    """Validated knobs for one unit-type x topology recipe."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    unit_type: UnitType
    topology: TopologyKind
    stride: Optional[int] = Field(default=None, ge=1)
    den_lm_order: Optional[int] = Field(default=None, ge=1)
    boost: float = Field(default=0.5, ge=0.0)
    kappa: float = Field(default=1.0, gt=0.0)
    specaugment: SpecAugmentName = "large"
    schedule: Optional[Schedule] = None
    tolerance: float = Field(default=5.0, ge=0.0)
    p_sil: float = Field(default=0.2, ge=0.0, lt=1.0)
    den_lm_silence: DenLmSilence = "random"
    num_units: Optional[int] = Field(default=None, ge=1)

    # training
    seed: int = 0
    hidden: int = Field(default=64, ge=1)
    learning_rate: float = Field(default=0.05, gt=0.0)
    clip_norm: float = Field(default=5.0, gt=0.0)
    batch_size: int = Field(default=8, ge=1)
    pretrain_epochs: int = Field(default=5, ge=0)
    mmi_epochs: int = Field(default=5, ge=0)
    prior_subset: int = Field(default=100, ge=1)

    # decoding and scoring
    beam: float = Field(default=16.0, gt=0.0)
    word_lm_order: int = Field(default=2, ge=1)
    frame_ms: float = Field(default=10.0, gt=0.0)

    # paths
    workdir: str = "exp"
    transcripts: Optional[str] = None
    features: Optional[str] = None
    alignments: Optional[str] = None
    alignment_inventory: Optional[str] = None
    questions: Optional[str] = None
    word_lm: Optional[str] = None

    @field_validator("unit_type", "topology", "specaugment", "schedule", mode="before")
    @classmethod
    def normalize_choice(cls, v: Optional[str]) -> Optional[str]:
        """Accept choices case-insensitively and with '_' for '-'."""
        if v is None:
            return None
        return str(v).strip().lower().replace("_", "-")

    @field_validator("tolerance", mode="before")
    @classmethod
    def parse_tolerance(cls, v: object) -> float:
        """Allow 'inf' to disable time constraints."""
        if isinstance(v, str) and v.strip().lower() in ("inf", "infinity"):
            return math.inf
        return float(v)  # type: ignore[arg-type]

    @model_validator(mode="after")
    def check_cell(self) -> "PipelineConfig":
        """Reject unit/topology cells and schedules that have no recipe."""
        if self.unit_type in ("mono-char", "bi-char") and self.topology == "ctc":
            raise ValueError(
                f"unsupported cell {SHORT_NAMES[self.unit_type]}-CTC: "
                "mono-char and bi-char units are only built with HMM topologies"
            )
        if self.unit_type == "chenone" and not self.alignments:
            raise ValueError("chenone systems require 'alignments' (bi-char segments)")
        if self.unit_type == "chenone" and not self.alignment_inventory:
            raise ValueError("chenone systems require 'alignment_inventory'")
        if self.effective_schedule.startswith("ce") and not self.alignments:
            raise ValueError(
                f"schedule {self.effective_schedule} needs frame alignments "
                "('alignments')"
            )
        if self.den_lm_silence == "alignment" and not self.alignments:
            raise ValueError("den_lm_silence = alignment needs 'alignments'")
        return self

    @property
    def cell(self) -> str:
        """Short cell name, e.g. 'wp-ctc'."""
        family = "ctc" if self.topology == "ctc" else "hmm"
        return f"{SHORT_NAMES[self.unit_type]}-{family}"

    @property
    def is_ctc(self) -> bool:
        return self.topology == "ctc"

    @property
    def effective_stride(self) -> int:
        if self.stride is not None:
            return self.stride
        return 8 if self.unit_type == "wordpiece" else 4

    @property
    def effective_den_lm_order(self) -> int:
        if self.den_lm_order is not None:
            return self.den_lm_order
        return 3 if self.unit_type == "wordpiece" else 4

    @property
    def effective_schedule(self) -> str:
        if self.schedule is not None:
            return self.schedule
        if self.cell == "wp-hmm":
            return "mmi"
        if self.cell == "ch-hmm":
            return "ce-mmi"
        return "ml-mmi"

    @property
    def effective_num_units(self) -> Optional[int]:
        if self.num_units is not None:
            return self.num_units
        return {
            "bi-char": DEFAULT_BICHAR_UNITS,
            "wordpiece": DEFAULT_WORDPIECES,
            "chenone": DEFAULT_CHENONES,
        }.get(self.unit_type)

    @property
    def allow_silence(self) -> bool:
        """Explicit silence modeling: every cell except wp-CTC."""
        return self.cell != "wp-ctc"

    @property
    def time_constrained(self) -> bool:
        return self.cell == "ch-hmm"

    def canonical_text(self) -> str:
        """Sorted key=value dump used for hashing."""
        data = self.model_dump()
        return "".join(f"{k}={data[k]}\n" for k in sorted(data))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()[:16]


def parse_config_text(text: str) -> dict[str, str]:
    """
    Parse the flat sectioned config format into one key/value namespace.

    Raises:
        ConfigError: On malformed lines or a key repeated across sections.
    """
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#", ";"), strict=True
    )
    try:
        parser.read_string("[__top__]\n" + text)
    except configparser.Error as e:
        raise ConfigError(f"malformed config: {e}".replace("\n", " ")) from e

    values: dict[str, str] = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            if key in values:
                raise ConfigError(f"key '{key}' defined in more than one section")
            values[key] = value.strip()
    return values


def load_config(path: str | Path) -> PipelineConfig:
    """
    Load and validate a pipeline config file.

    Raises:
        ConfigError: If the file is missing or malformed.
        pydantic.ValidationError: If a value or the unit/topology cell is invalid.
    """
    config_path = Path(path)
    if not config_path.is_file():
        raise ConfigError(f"config file not found: {config_path}")
    values = parse_config_text(config_path.read_text(encoding="utf-8"))
    return PipelineConfig.model_validate(values)
