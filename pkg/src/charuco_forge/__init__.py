"""ChArUco-style board toolkit: rendering, detection, refinement, pose."""

from .board import BoardSpec, Dictionary, board_object_points, default_dictionary
from .image import AugmentConfig, GrayImage, Homography

__version__ = "0.1.0"

__all__ = [
    "BoardSpec",
    "Dictionary",
    "GrayImage",
    "Homography",
    "AugmentConfig",
    "board_object_points",
    "default_dictionary",
    "__version__",
]
