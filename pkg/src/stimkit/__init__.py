"""Evaluation and targeting toolkit for threshold-coupon stimulus programs."""

from .exceptions import ConfigError, DataError, DependencyError, EstimationError, StimkitError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DataError", "DependencyError", "EstimationError", "StimkitError", "__version__"]
