"""Desk-scale diffusion modeling for skeletal human motion.

Submodules:
    skeleton     kinematic tree, forward kinematics, foot contacts
    motion_data  feature layout, normalization, motion file format, datasets
    corpus       procedural motion generator with text and action labels
    diffusion    noise schedule, forward process, guided reverse sampling
    denoiser     transformer denoiser and condition embedders
    training     geometric losses and the training loop
    editing      inpainting-style editing masks and presets
    evaluation   generative metrics (FID, diversity, R-precision, ...)
    rendering    stick-figure plots, image/GIF export
    cli          command-line entry point
"""

__version__ = "0.1.0"

from .errors import (
    CheckpointError,
    SamplingError,
    ShapeError,
    TrainingDivergenceError,
    ValidationError,
)

__all__ = [
    "CheckpointError",
    "SamplingError",
    "ShapeError",
    "TrainingDivergenceError",
    "ValidationError",
    "__version__",
]
