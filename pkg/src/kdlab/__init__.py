"""kdlab: layer-to-layer knowledge distillation on small transformer encoders.

Pure-numpy reference implementation of intermediate-layer distillation
strategies: fixed skip/last layer mappings, attention-based mappings, and
random per-epoch layer selection, plus the surrounding training, data
generation, and analysis tooling.
"""

__version__ = "0.1.0"

from .errors import (
    ConfigError,
    DataError,
    KdlabError,
    MeasurementError,
    NumericError,
    ShapeError,
)

__all__ = [
    "ConfigError",
    "DataError",
    "KdlabError",
    "MeasurementError",
    "NumericError",
    "ShapeError",
    "__version__",
]
