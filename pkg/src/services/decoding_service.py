"""
Decoding service module.

Serves one trained system: the decode graph, its unit inventory and the
checkpoint named in the settings. The three files are loaded once per path
triple and shared by all requests.
"""

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Optional

import numpy as np

from core.logging import get_logger
from core.settings import settings
from services.decoder import (
    DecodeError,
    DecodeGraph,
    Hypothesis,
    read_decode_graph,
    viterbi_decode,
)
from services.trainer import Checkpoint, decode_checkpoint
from services.units import UnitInventory

logger = get_logger(__name__)


class DecodingServiceError(DecodeError):
    """Raised when the served system is not configured or cannot be loaded."""

    pass


@dataclass(frozen=True)
class ServedModel:
    graph: DecodeGraph
    inventory: UnitInventory
    checkpoint: Checkpoint


@lru_cache(maxsize=4)
def load_served_model(
    graph_path: str, inventory_path: str, checkpoint_path: str
) -> ServedModel:
    """
    Read and cross-check the served artifacts.

    Raises:
        DecodingServiceError: If a file is missing.
        InventoryMismatchError: If the graph or checkpoint do not fit the
            inventory.
    """
    for path in (graph_path, inventory_path, checkpoint_path):
        if not Path(path).is_file():
            raise DecodingServiceError(f"served artifact not found: {path}")
    inventory = UnitInventory.from_tsv(Path(inventory_path).read_text(encoding="utf-8"))
    graph = read_decode_graph(Path(graph_path).read_text(encoding="utf-8"))
    graph.check_inventory(inventory)
    checkpoint = decode_checkpoint(Path(checkpoint_path).read_bytes())
    if checkpoint.scorer.num_units != inventory.size:
        raise DecodingServiceError(
            f"checkpoint scores {checkpoint.scorer.num_units} units, "
            f"inventory has {inventory.size}"
        )
    logger.info(
        "served model loaded",
        extra={
            "extra_fields": {
                "graph": graph_path,
                "words": len(graph.words),
                "units": inventory.size,
            }
        },
    )
    return ServedModel(graph, inventory, checkpoint)


class DecodingService:
    """Decodes logits or features with the configured system."""

    def __init__(
        self,
        graph_path: Optional[str] = None,
        inventory_path: Optional[str] = None,
        checkpoint_path: Optional[str] = None,
    ):
        self.graph_path = graph_path or settings.decode_graph
        self.inventory_path = inventory_path or settings.inventory
        self.checkpoint_path = checkpoint_path or settings.checkpoint

    def _model(self) -> ServedModel:
        if not (self.graph_path and self.inventory_path and self.checkpoint_path):
            raise DecodingServiceError(
                "decoding is not configured; set HYBRIDAM_DECODE_GRAPH, "
                "HYBRIDAM_INVENTORY and HYBRIDAM_CHECKPOINT"
            )
        return load_served_model(
            self.graph_path, self.inventory_path, self.checkpoint_path
        )

    async def get_model_info(self) -> dict:
        """Describe the served system."""
        model = self._model()
        return {
            "unit_type": model.graph.unit_type,
            "topology": model.graph.topology,
            "words": len(model.graph.words),
            "units": model.inventory.size,
            "stride": model.checkpoint.scorer.stride,
            "feat_dim": model.checkpoint.scorer.feat_dim,
        }

    async def decode(
        self,
        logits: Optional[np.ndarray] = None,
        features: Optional[np.ndarray] = None,
        beam: float = 16.0,
    ) -> Hypothesis:
        """
        Decode one utterance given either unit logits or input features.

        Raises:
            DecodeError: On shape mismatches or when no path survives.
        """
        model = self._model()
        scorer = model.checkpoint.scorer
        if features is not None:
            if features.ndim != 2 or features.shape[1] != scorer.feat_dim:
                raise DecodeError(
                    f"features must have shape (frames, {scorer.feat_dim}), "
                    f"got {features.shape}"
                )
            logits = scorer.logits(features)
        if logits is None:
            raise DecodeError("either logits or features are required")
        if logits.ndim != 2 or logits.shape[1] != model.inventory.size:
            raise DecodeError(
                f"logits must have shape (frames, {model.inventory.size}), "
                f"got {logits.shape}"
            )
        if logits.shape[0] == 0:
            raise DecodeError("cannot decode an empty utterance")
        return viterbi_decode(logits, model.graph, model.checkpoint.loss_config(), beam)
