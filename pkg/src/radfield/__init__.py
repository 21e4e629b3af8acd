"""Depth-uncertainty-supervised neural radiance field engine.

A desk-scale differentiable volume renderer plus MLP scene field, trained
with a three-term loss that fits each ray's depth PDF to a per-ray Gaussian
target. Hot kernels run through a compiled extension when built, with a pure
numpy fallback selected at import (see :mod:`radfield.backend`).
"""

from .backend import backend_name
from .errors import (ConfigError, DataError, DivergenceError, DomainError,
                     NumericError, RadfieldError, UsageError)

__version__ = "0.1.0"

__all__ = [
    "backend_name",
    "RadfieldError", "ConfigError", "DataError", "DomainError",
    "UsageError", "NumericError", "DivergenceError",
    "__version__",
]
