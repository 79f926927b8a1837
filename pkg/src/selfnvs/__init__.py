"""Self-supervised novel view synthesis and camera estimation from
uncalibrated clips: latent pretraining plus explicit surfel alignment."""

__version__ = "0.1.0"

from .geometry import Extrinsics, Intrinsics
from .model import ModelConfig, SceneModel
from .splat import Gaussians2D, RenderOutput, rasterize

__all__ = [
    "Extrinsics",
    "Intrinsics",
    "ModelConfig",
    "SceneModel",
    "Gaussians2D",
    "RenderOutput",
    "rasterize",
]
