"""Uncertainty-aware binary segmentation with a variational attention U-Net."""

from .layers import GaussianPosterior, PriorSpec, VariationalConv2D, kl_divergence
from .rng import RngStream
from .tensor import Tensor, no_grad
from .uncertainty import McConfig, UncertaintyResult, decompose_uncertainty, mc_predict
from .unet import ArchConfig, ModelGraph, build_model

__version__ = "0.1.0"

__all__ = [
    "ArchConfig",
    "GaussianPosterior",
    "McConfig",
    "ModelGraph",
    "PriorSpec",
    "RngStream",
    "Tensor",
    "UncertaintyResult",
    "VariationalConv2D",
    "build_model",
    "decompose_uncertainty",
    "kl_divergence",
    "mc_predict",
    "no_grad",
    "__version__",
]
