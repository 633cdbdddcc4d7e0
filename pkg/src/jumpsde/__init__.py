"""Simulation and verification of jump-diffusion SDEs with discontinuous drift."""

__version__ = "0.1.0"

from .coefficients import Model, TransformedModel
from .presets import build_model
from .solver import SchemeConfig, simulate_paths
from .transform import Transform, build_transform

__all__ = ["Model", "TransformedModel", "SchemeConfig", "Transform", "build_model",
           "build_transform", "simulate_paths", "__version__"]
