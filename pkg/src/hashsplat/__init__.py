"""Deformable hash-grid Gaussian splatting for dynamic scenes (CPU / numpy)."""
from .gaussians import Camera, GaussianCloud
from .rasterizer import render_gaussians, render_reference, render_tiled
from .trainer import Trainer, TrainConfig, preset

__version__ = "0.1.0"
__all__ = ["Camera", "GaussianCloud", "Trainer", "TrainConfig", "preset",
           "render_gaussians", "render_reference", "render_tiled"]
