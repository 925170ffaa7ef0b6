"""Visible-surface overlap ground truth, box embeddings and retrieval."""

from .boxes import (
    HARD,
    BoxEmbedding,
    BoxParams,
    SmoothingConfig,
    intersection_volume,
    nbo,
    nbo_gradient,
    params_to_box,
    sigma,
    volume,
)
from .geometry import (
    CameraIntrinsics,
    CameraView,
    NSOConfig,
    OverlapRecord,
    Pose,
    SurfelCloud,
    backproject,
    compute_nso,
    estimate_normals,
    overlap_count,
    overlap_count_brute,
    subsample,
)
from .retrieval import BoxIndex, QueryResult, classify_relation, estimate_scale
from .training import (
    EmbeddingTable,
    PairDataset,
    TrainConfig,
    evaluate,
    loss_box,
    loss_vector,
    nso_min,
    nso_symmetric,
    train,
)

__version__ = "0.1.0"
