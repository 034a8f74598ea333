"""Deep attentive least squares (DEAL) image reconstruction."""

from .estimator import DEAL
from .linop import ConvDownsample, FourierMask, Identity, estimate_spectral_norm, make_operator
from .maskgen import MaskNet
from .multiconv import MultiConv
from .solver import DealModel, SolveConfig, SolveReport, cg_solve, deal_reconstruct, deal_step, psnr
from .spline import LinearSpline

__version__ = "0.1.0"

__all__ = [
    "DEAL",
    "ConvDownsample",
    "DealModel",
    "FourierMask",
    "Identity",
    "LinearSpline",
    "MaskNet",
    "MultiConv",
    "SolveConfig",
    "SolveReport",
    "cg_solve",
    "deal_reconstruct",
    "deal_step",
    "estimate_spectral_norm",
    "make_operator",
    "psnr",
]
