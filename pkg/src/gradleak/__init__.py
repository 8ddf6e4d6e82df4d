"""Gradient inversion lab: small smooth MLPs, gradient-matching attacks and
curvature-based vulnerability proxies."""

__version__ = "0.1.0"

from .errors import (
    AttackFailedError,
    ConfigError,
    ContractError,
    DegenerateGradientError,
    DimensionError,
    GradLeakError,
    InsufficientDataError,
    ParseError,
)
from .gradmatch import GradLossKind, GradTarget, ImageShape
from .smallnet import NetSpec, Sample, Weights
from .tensorcore import SeededRng

__all__ = [
    "AttackFailedError",
    "ConfigError",
    "ContractError",
    "DegenerateGradientError",
    "DimensionError",
    "GradLeakError",
    "GradLossKind",
    "GradTarget",
    "ImageShape",
    "InsufficientDataError",
    "NetSpec",
    "ParseError",
    "Sample",
    "SeededRng",
    "Weights",
    "__version__",
]
