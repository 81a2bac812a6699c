"""Self-supervised depth refinement constrained by polarimetric measurements."""

from .errors import (BoundsError, ConfigurationError, DegenerateGeometryError, DimensionError,
                     DomainError, EmptyAggregationError, NumericalError, PolarDepthError)
from .evaluation import MetricsReport, SkyReport, eigen_metrics, protocol_masks, sky_accuracy
from .geometry import CameraIntrinsics, DisparityMap, RigidPose, field_angles, warp_image
from .losses import LossBreakdown, LossWeights, total_loss
from .optimize import OptimizationTrace, OptimizerConfig, gradient_check, numeric_gradient, refine_depth
from .polar import AnalyzerStack, MosaicFrame, PolarImage, decode, demosaic
from .simulator import Scene, render_sequence, render_view

__version__ = "0.1.0"

__all__ = [
    "AnalyzerStack", "BoundsError", "CameraIntrinsics", "ConfigurationError",
    "DegenerateGeometryError", "DimensionError", "DisparityMap", "DomainError",
    "EmptyAggregationError", "LossBreakdown", "LossWeights", "MetricsReport", "MosaicFrame",
    "NumericalError", "OptimizationTrace", "OptimizerConfig", "PolarDepthError", "PolarImage",
    "RigidPose", "Scene", "SkyReport", "decode", "demosaic", "eigen_metrics", "field_angles",
    "gradient_check", "numeric_gradient", "protocol_masks", "refine_depth", "render_sequence",
    "render_view", "sky_accuracy", "total_loss", "warp_image",
]
