"""
Work directory layout and stamped artifact IO.

Every text artifact written by a subcommand starts with a
``# config_hash=<hash>`` line naming the config that produced it. Readers
strip that line and refuse files produced under another config, so a
stale graph or lexicon is never mixed into a run.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from core.config import PipelineConfig
from core.errors import HybridAmError
from core.logging import get_logger

logger = get_logger(__name__)

STAMP_KEY = "config_hash"


class ArtifactError(HybridAmError):
    """Raised when an artifact is missing or was produced by another config."""

    pass


@dataclass(frozen=True)
class Workdir:
    """Fixed file names below ``PipelineConfig.workdir``."""

    root: Path

    @classmethod
    def of(cls, config: PipelineConfig) -> "Workdir":
        return cls(Path(config.workdir))

    @property
    def inventory(self) -> Path:
        return self.root / "units.tsv"

    @property
    def lexicon(self) -> Path:
        return self.root / "lexicon.tsv"

    @property
    def tree(self) -> Path:
        return self.root / "tree.tsv"

    @property
    def den_lm(self) -> Path:
        return self.root / "den_lm.arpa"

    @property
    def word_lm(self) -> Path:
        return self.root / "word_lm.arpa"

    @property
    def den(self) -> Path:
        return self.root / "den.fst"

    @property
    def num_dir(self) -> Path:
        return self.root / "num"

    def num(self, utt_id: str) -> Path:
        return self.num_dir / f"{utt_id}.fst"

    @property
    def checkpoint_dir(self) -> Path:
        return self.root / "checkpoints"

    @property
    def checkpoint(self) -> Path:
        return self.root / "final.ckpt"

    @property
    def objective_log(self) -> Path:
        return self.root / "objective.tsv"

    @property
    def alignments(self) -> Path:
        return self.root / "alignments.txt"

    @property
    def decode_graph(self) -> Path:
        return self.root / "decode.fst"

    @property
    def hypotheses(self) -> Path:
        return self.root / "hyp.txt"


def stamp(text: str, config: PipelineConfig) -> str:
    return f"# {STAMP_KEY}={config.config_hash()}\n{text}"


def unstamp(text: str, config: Optional[PipelineConfig], source: str = "") -> str:
    """
    Drop the stamp line, checking it against ``config`` when one is given.

    Raises:
        ArtifactError: If the stamp is missing or names another config.
    """
    first, _, rest = text.partition("\n")
    prefix = f"# {STAMP_KEY}="
    if not first.startswith(prefix):
        raise ArtifactError(f"{source or 'artifact'} carries no config hash")
    found = first[len(prefix) :].strip()
    if config is not None and found != config.config_hash():
        raise ArtifactError(
            f"{source or 'artifact'} was produced by config {found}, "
            f"current config is {config.config_hash()}"
        )
    return rest


def write_artifact(path: Path, text: str, config: PipelineConfig) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(stamp(text, config), encoding="utf-8")
    logger.info(
        "artifact written",
        extra={
            "extra_fields": {"path": str(path), "config_hash": config.config_hash()}
        },
    )


def read_artifact(path: Path, config: PipelineConfig) -> str:
    """
    Read a stamped artifact produced under ``config``.

    Raises:
        ArtifactError: If the file is missing or its stamp does not match.
    """
    if not path.is_file():
        raise ArtifactError(
            f"missing artifact {path}; run the producing subcommand first"
        )
    return unstamp(path.read_text(encoding="utf-8"), config, str(path))


def read_input(path: Optional[str], what: str) -> str:
    """
    Read a user-supplied input file (transcripts, alignments, LM).

    Raises:
        ArtifactError: If no path is configured or the file does not exist.
    """
    if not path:
        raise ArtifactError(f"no {what} path configured")
    source = Path(path)
    if not source.is_file():
        raise ArtifactError(f"{what} file not found: {source}")
    text = source.read_text(encoding="utf-8")
    if text.startswith(f"# {STAMP_KEY}="):
        return unstamp(text, None, str(source))
    return text
