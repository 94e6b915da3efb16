"""Variance-aware prototypical networks with Wasserstein class Gaussians."""

from .errors import (
    ConfigurationError,
    FormatError,
    IncompatibleVersionError,
    NumericError,
    RegistryLookupError,
    UsageError,
    VarProtoError,
)
from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigurationError",
    "FormatError",
    "IncompatibleVersionError",
    "NumericError",
    "RegistryLookupError",
    "UsageError",
    "VarProtoError",
    "__version__",
]
