"""Dense self-supervised pixel embeddings with descriptor vector exchange."""

__version__ = "0.1.0"

from .core import (
    AuxiliarySet,
    EmbeddingMap,
    MatchDistribution,
    correspondence_loss,
    dve_loss,
    dve_reconstruct,
    match_distribution,
    similarity_grid,
)
from .embedder import (
    DenseEmbedder,
    EmbedderSpec,
    build_embedder,
    embed,
    embed_batch,
    load_checkpoint,
    parameter_count,
    save_checkpoint,
    state_fingerprint,
)
from .trainer import TrainConfig, assemble_batch, finetune_unsupervised, pair_loss, train
from .warps import (
    WarpConfig,
    WarpField,
    apply_warp,
    downsample_warp,
    identity_warp_field,
    invert_warp,
    load_warp_field,
    sample_warp,
    save_warp_field,
    warp_points,
)

__all__ = [
    "__version__",
    "AuxiliarySet",
    "EmbeddingMap",
    "MatchDistribution",
    "correspondence_loss",
    "dve_loss",
    "dve_reconstruct",
    "match_distribution",
    "similarity_grid",
    "DenseEmbedder",
    "EmbedderSpec",
    "build_embedder",
    "embed",
    "embed_batch",
    "load_checkpoint",
    "parameter_count",
    "save_checkpoint",
    "state_fingerprint",
    "TrainConfig",
    "assemble_batch",
    "finetune_unsupervised",
    "pair_loss",
    "train",
    "WarpConfig",
    "WarpField",
    "apply_warp",
    "downsample_warp",
    "identity_warp_field",
    "invert_warp",
    "load_warp_field",
    "sample_warp",
    "save_warp_field",
    "warp_points",
]
