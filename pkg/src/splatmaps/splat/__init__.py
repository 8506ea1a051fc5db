"""Differentiable software rasterizer for 3D Gaussians."""

from . import _backend as backend
from .projection import (
    ALPHA_MAX,
    ALPHA_MIN,
    COV2D_DILATION,
    Z_NEAR,
    ProjectedGaussian,
    Projection,
    project,
    project_gaussians,
    projection_backward,
)
from .raster import TILE, GradientBuffer, RenderOutput, bin_tiles, rasterize, rasterize_backward

__all__ = [
    "ALPHA_MAX",
    "ALPHA_MIN",
    "COV2D_DILATION",
    "TILE",
    "Z_NEAR",
    "GradientBuffer",
    "ProjectedGaussian",
    "Projection",
    "RenderOutput",
    "backend",
    "bin_tiles",
    "project",
    "project_gaussians",
    "projection_backward",
    "rasterize",
    "rasterize_backward",
]
