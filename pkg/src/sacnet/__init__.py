"""Spatial attenuation context engine and toy saliency network."""

from .tensor import Shape, ShapeError, Tensor, concat_channels, from_array, zeros
from .sac import (SacConfig, SacWeights, ScanParams, alpha_schedule,
                  attenuated_scan, attention_weights, fuse_round, sac_forward,
                  sac_init)

__version__ = "0.1.0"

__all__ = [
    "Shape", "ShapeError", "Tensor", "concat_channels", "from_array", "zeros",
    "SacConfig", "SacWeights", "ScanParams", "alpha_schedule",
    "attenuated_scan", "attention_weights", "fuse_round", "sac_forward",
    "sac_init", "__version__",
]
