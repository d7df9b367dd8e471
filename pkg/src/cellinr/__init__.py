"""Self-supervised volumetric denoising with per-volume neural fields."""

__version__ = "0.1.0"
