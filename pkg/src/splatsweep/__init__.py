"""Plane-sweep multi-view stereo with probability-volume splatting.

Estimates reference-view depth through a three-stage coarse-to-fine cascade
of plane-sweep cost volumes, synthesizes source-view depths by forward
splatting the probability volume, renders images across views both ways and
scores everything with an unsupervised photometric/SSIM/smoothness/
consistency objective.  Includes a synthetic ray-cast scene generator,
depth-map fusion to point clouds and accuracy/completeness metrics.
"""

from .camera import (
    BehindCameraError,
    CameraParams,
    backproject,
    project,
    scale_camera,
    warp_pixel,
)
from .grids import CostVolume, DepthMap, FeatureGrid, ProbabilityVolume
from .sampling import (
    DepthHypothesisGrid,
    UncertaintyMap,
    adaptive_bins_hypotheses,
    adaptive_gaussian_hypotheses,
    entropy_map,
    uniform_hypotheses,
)
from .cost import (
    aggregate_variance,
    build_feature_volume,
    extract_features,
    regress_depth,
    regularize_to_probability,
)
from .splatting import (
    SplatConfig,
    render_reference_image,
    render_source_image,
    smooth_reference_image,
    splat_weights,
    synthesize_source_depth,
)
from .losses import (
    LossBreakdown,
    LossWeights,
    depth_consistency_loss,
    depth_smoothness_loss,
    gradient_check,
    photometric_loss,
    ssim_loss,
    total_loss,
)

__all__ = [
    "BehindCameraError",
    "CameraParams",
    "CostVolume",
    "DepthHypothesisGrid",
    "DepthMap",
    "FeatureGrid",
    "LossBreakdown",
    "LossWeights",
    "ProbabilityVolume",
    "SplatConfig",
    "UncertaintyMap",
    "adaptive_bins_hypotheses",
    "adaptive_gaussian_hypotheses",
    "aggregate_variance",
    "backproject",
    "build_feature_volume",
    "depth_consistency_loss",
    "depth_smoothness_loss",
    "entropy_map",
    "extract_features",
    "gradient_check",
    "photometric_loss",
    "project",
    "regress_depth",
    "regularize_to_probability",
    "render_reference_image",
    "render_source_image",
    "scale_camera",
    "smooth_reference_image",
    "splat_weights",
    "ssim_loss",
    "synthesize_source_depth",
    "total_loss",
    "uniform_hypotheses",
    "warp_pixel",
]

__version__ = "0.1.0"
