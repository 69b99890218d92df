"""foaground: spatial audio-visual perception at desk scale.

Subpackages cover camera-frame geometry (`spatial_frame`), ambisonic signal
processing (`foa_core`), shoebox room simulation (`room_sim`), a learned
directional front-end (`neural_iv`), depth rendering (`scene_render`),
QA dataset synthesis (`dataset_gen`), and evaluation (`eval_harness`).
"""

__version__ = "0.1.0"

from .spatial_frame import Box3D, CameraIntrinsics, DepthFrame, Direction, DoA
from .foa_core import FoaSignal, StftConfig

__all__ = [
    "Box3D",
    "CameraIntrinsics",
    "DepthFrame",
    "Direction",
    "DoA",
    "FoaSignal",
    "StftConfig",
    "__version__",
]
