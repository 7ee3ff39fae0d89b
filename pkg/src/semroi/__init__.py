"""Transformation-robust RoI feature extraction with semantic attention
masks, a dynamic grid sampler, hand-derived gradients, reference pooling
baselines, and a synthetic evaluation harness."""

from .baselines import roi_align, roi_pool
from .core import (
    ExtractResult,
    SraConfig,
    SraParams,
    extract_on_grid,
    init_params,
    mask_logits,
    masks_from_logits,
    param_leaves,
    parameter_count,
    roi_descriptor,
    sample_roi_feature,
    semantic_feature_map,
    sra_backward,
    sra_extract,
    sra_extract_recorded,
)
from .embeddings import area_embedding_raw, position_embedding_raw, project_embedding
from .evaluate import (
    DiversityReport,
    FlopsEstimate,
    InvarianceReport,
    flops_estimate,
    invariance_eval,
    make_feature_fn,
    mask_diversity,
)
from .numerics import (
    ConfigError,
    GradCheckReport,
    LayerNormParams,
    LinearParams,
    ShapeError,
    VjpRecord,
    bilinear_sample,
    check_vjp,
    layer_norm,
    linear,
    relu,
    softmax_spatial,
)
from .sampler import (
    FIXED_GRID,
    GridSize,
    RoIBox,
    block_average_pool,
    dynamic_grid_size,
)
from .synthetic import (
    Pose,
    SyntheticInstance,
    TransformRanges,
    apply_transform,
    generate_dataset,
    load_dataset,
    save_dataset,
)
from .train import TrainState, TrainingDiverged, compare_extractors, train_toy

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DiversityReport",
    "ExtractResult",
    "FIXED_GRID",
    "FlopsEstimate",
    "GradCheckReport",
    "GridSize",
    "InvarianceReport",
    "LayerNormParams",
    "LinearParams",
    "Pose",
    "RoIBox",
    "ShapeError",
    "SraConfig",
    "SraParams",
    "SyntheticInstance",
    "TrainState",
    "TrainingDiverged",
    "TransformRanges",
    "VjpRecord",
    "apply_transform",
    "area_embedding_raw",
    "bilinear_sample",
    "block_average_pool",
    "check_vjp",
    "compare_extractors",
    "dynamic_grid_size",
    "extract_on_grid",
    "flops_estimate",
    "generate_dataset",
    "init_params",
    "invariance_eval",
    "layer_norm",
    "linear",
    "load_dataset",
    "make_feature_fn",
    "mask_diversity",
    "mask_logits",
    "masks_from_logits",
    "param_leaves",
    "parameter_count",
    "position_embedding_raw",
    "project_embedding",
    "relu",
    "roi_align",
    "roi_descriptor",
    "roi_pool",
    "sample_roi_feature",
    "save_dataset",
    "semantic_feature_map",
    "softmax_spatial",
    "sra_backward",
    "sra_extract",
    "sra_extract_recorded",
    "train_toy",
]
