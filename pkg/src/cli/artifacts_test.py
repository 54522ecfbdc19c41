"""
Tests for work directory artifacts.
"""

import pytest

from cli.artifacts import (
    ArtifactError,
    Workdir,
    read_artifact,
    read_input,
    stamp,
    write_artifact,
)
from core.config import PipelineConfig


def make_config(tmp_path, **overrides) -> PipelineConfig:
    values = {"unit_type": "mono-char", "topology": "chain", "workdir": str(tmp_path)}
    values.update(overrides)
    return PipelineConfig(**values)


def test_artifact_round_trip(tmp_path):
    """The stamp is added on write and removed on read."""
    config = make_config(tmp_path)
    wd = Workdir.of(config)

    write_artifact(wd.inventory, "0\t<sil>\n", config)

    stamp_line = f"# config_hash={config.config_hash()}\n"
    assert wd.inventory.read_text().startswith(stamp_line)
    assert read_artifact(wd.inventory, config) == "0\t<sil>\n"


def test_artifact_from_other_config_is_refused(tmp_path):
    """A different config hash means a stale artifact."""
    config = make_config(tmp_path)
    other = make_config(tmp_path, boost=0.1)
    wd = Workdir.of(config)
    write_artifact(wd.lexicon, "ab\t1 2\n", config)

    with pytest.raises(ArtifactError, match="produced by config"):
        read_artifact(wd.lexicon, other)


def test_missing_artifact_names_the_file(tmp_path):
    """Reading before the producing step fails with the path."""
    config = make_config(tmp_path)

    with pytest.raises(ArtifactError, match="den.fst"):
        read_artifact(Workdir.of(config).den, config)


def test_read_input_accepts_foreign_stamps(tmp_path):
    """Inputs produced by another system's config are read as-is."""
    other = make_config(tmp_path, unit_type="bi-char")
    path = tmp_path / "alignments.txt"
    path.write_text(stamp("u 0 0 3\n", other))

    assert read_input(str(path), "alignments") == "u 0 0 3\n"


def test_read_input_requires_a_path(tmp_path):
    """Unset and missing inputs are errors."""
    with pytest.raises(ArtifactError, match="no transcripts path"):
        read_input(None, "transcripts")
    with pytest.raises(ArtifactError, match="not found"):
        read_input(str(tmp_path / "absent.txt"), "transcripts")
