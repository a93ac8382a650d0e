"""Software Gaussian splatting with rasterized depth and normal maps."""

from .core import Camera, Gaussian3D, ProjectionBatch, SplatProjection, SplatSet, project_scene, project_splat
from .errors import (
    BehindCameraError,
    DataError,
    DegenerateCovarianceError,
    DegenerateProjectionError,
    FitDivergedError,
    FormatError,
    InvalidPrimitiveError,
    SplatError,
    StateError,
)
from .fit import FitResult, FitSchedule, TargetView, fit
from .fusion import TriangleMesh, TsdfVolume, extract_mesh, fuse_views, integrate_depth
from .grad import LossSeeds, ParamGradients, backward, grad_check
from .losses import LossTerms, LossWeights, depth_distortion, normal_consistency, normal_from_depth, photometric_loss, total_loss
from .rasterizer import BlendRecords, FrameBuffers, PixelBlendRecord, RenderOptions, render

__version__ = "0.1.0"

__all__ = [
    "Camera", "Gaussian3D", "SplatSet", "SplatProjection", "ProjectionBatch", "project_scene", "project_splat",
    "RenderOptions", "FrameBuffers", "BlendRecords", "PixelBlendRecord", "render",
    "LossWeights", "LossTerms", "depth_distortion", "normal_consistency", "normal_from_depth",
    "photometric_loss", "total_loss",
    "LossSeeds", "ParamGradients", "backward", "grad_check",
    "FitSchedule", "FitResult", "TargetView", "fit",
    "TsdfVolume", "TriangleMesh", "integrate_depth", "fuse_views", "extract_mesh",
    "SplatError", "InvalidPrimitiveError", "DegenerateCovarianceError", "BehindCameraError",
    "DegenerateProjectionError", "FormatError", "DataError", "StateError", "FitDivergedError",
]
