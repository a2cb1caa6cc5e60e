"""Joint road-segment / land-parcel representation learning.

Builds a heterogeneous map-entity graph from segments, parcels, POIs and
trajectories, pretrains a joint encoder with contrastive objectives, and
evaluates the frozen embeddings on downstream urban tasks.
"""

from .contrastive import AugmentationConfig, LossWeights, ViewConfig
from .encoder import EncoderConfig, MapEncoder
from .entities import MapBundle, load_bundle, save_bundle
from .graphs import GraphConfig, MapGraph, assemble_graph, load_graph, save_graph
from .synth import SynthSpec, generate_synthetic_city
from .train import (
    Checkpoint,
    TrainConfig,
    compute_embeddings,
    export_embeddings,
    grad_check,
    load_embeddings,
    pretrain,
    restore_model,
)

__all__ = [
    "AugmentationConfig",
    "Checkpoint",
    "EncoderConfig",
    "GraphConfig",
    "LossWeights",
    "MapBundle",
    "MapEncoder",
    "MapGraph",
    "SynthSpec",
    "TrainConfig",
    "ViewConfig",
    "assemble_graph",
    "compute_embeddings",
    "export_embeddings",
    "generate_synthetic_city",
    "grad_check",
    "load_bundle",
    "load_embeddings",
    "load_graph",
    "pretrain",
    "restore_model",
    "save_bundle",
    "save_graph",
]

__version__ = "0.1.0"
