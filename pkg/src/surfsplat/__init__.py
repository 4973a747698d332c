"""surfsplat: deformable-surface reconstruction at desk scale.

Three stages: (1) fit a signed-distance + color grid to the first frame
and extract a triangle mesh, (2) bind one Gaussian kernel per triangle
and optimize a mesh-restricted splat scene, (3) deform the scene frame by
frame under local rigidity and global rotation/isometry regularizers.
"""

__version__ = "0.1.0"

from .camera import Camera
from .dataset import FrameData, load_dataset, save_dataset
from .errors import (
    BehindCameraError,
    ConfigError,
    DataError,
    DivergenceError,
    NonFiniteGradientError,
    SurfsplatError,
)

__all__ = [
    "Camera",
    "FrameData",
    "load_dataset",
    "save_dataset",
    "SurfsplatError",
    "ConfigError",
    "DataError",
    "BehindCameraError",
    "DivergenceError",
    "NonFiniteGradientError",
    "__version__",
]
