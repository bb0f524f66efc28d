"""Multimodal ultra-short-term irradiance forecasting.

A cloud-image encoder and an FFT-periodized time-series branch are fused by
a cross-modal selective state-space scan, all on a self-contained float64
autodiff core so every gradient is checkable against finite differences.
"""

__version__ = "0.1.0"

from .errors import (ConfigError, ContractError, DataError, M3SError,
                     NumericError, ShapeError)

__all__ = [
    "__version__",
    "M3SError", "ShapeError", "ContractError", "NumericError",
    "ConfigError", "DataError",
]
