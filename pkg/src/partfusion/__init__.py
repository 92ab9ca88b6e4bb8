"""Multi-level 3D part instance segmentation with semantic-probability-guided
instance feature fusion and region-center-assisted mean-shift clustering."""

from .clustering import (
    ClusterParams,
    FlatMeanShift,
    InstancePrediction,
    apply_region_push,
    cluster_instances,
    mean_shift,
)
from .estimator import PartInstanceSegmenter
from .fusion import (
    aggregate_part_features,
    fuse_cross_level,
    fuse_point_features,
    fuse_single_level,
    one_hot_projection,
)
from .metrics import MetricsReport, evaluate_dataset
from .network import ModelConfig, forward, init_params, train
from .shapes import (
    AugmentParams,
    LabeledShape,
    ShapeSpec,
    augment,
    generate_shape,
    normalize_to_unit_sphere,
)

__version__ = "0.1.0"

__all__ = [
    "AugmentParams",
    "ClusterParams",
    "FlatMeanShift",
    "InstancePrediction",
    "LabeledShape",
    "MetricsReport",
    "ModelConfig",
    "PartInstanceSegmenter",
    "ShapeSpec",
    "aggregate_part_features",
    "apply_region_push",
    "augment",
    "cluster_instances",
    "evaluate_dataset",
    "forward",
    "fuse_cross_level",
    "fuse_point_features",
    "fuse_single_level",
    "generate_shape",
    "init_params",
    "mean_shift",
    "normalize_to_unit_sphere",
    "one_hot_projection",
    "train",
]
