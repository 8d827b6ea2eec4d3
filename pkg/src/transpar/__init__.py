"""Transferable parameter learning for unsupervised domain adaptation, at desk scale."""

from .errors import ConfigurationError, NumericFailure

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "NumericFailure", "__version__"]
