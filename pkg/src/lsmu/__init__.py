"""Latent-space stochastic model updating.

Hyperparameter inference for aleatory uncertainty models, using the encoder
of a variational autoencoder as an amortized density for the likelihood.
"""

from .errors import (
    ConfigError,
    DivergenceError,
    DomainError,
    LsmuError,
    NumericError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DivergenceError",
    "DomainError",
    "LsmuError",
    "NumericError",
    "__version__",
]
