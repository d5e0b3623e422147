"""Reference-guided inpainting of explicit voxel radiance fields.

Fits a dense voxel grid with spherical-harmonic color to a multi-view
dataset, supervising the user-masked region with a single inpainted
reference image: aligned monocular disparity supplies geometry, a bilateral
solver corrects view-substituted renders for view-dependent appearance, and
reprojection-based disocclusion masks route independent 2D in-fills to
regions the reference cannot see.
"""

from .core import (
    Camera,
    ImageBuffer,
    MaskBuffer,
    Ray,
    ScenePackage,
    load_dataset,
    save_dataset,
)
from .field import VoxelRadianceField
from .render import SamplingSpec, render_image, render_rays
from .trainer import TrainConfig, fit

__all__ = [
    "Camera",
    "ImageBuffer",
    "MaskBuffer",
    "Ray",
    "ScenePackage",
    "SamplingSpec",
    "TrainConfig",
    "VoxelRadianceField",
    "fit",
    "load_dataset",
    "render_image",
    "render_rays",
    "save_dataset",
]
