"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes (config 2, data 3, numeric 4),
so raising the right class matters at module boundaries.
"""


class KdlabError(Exception):
    """Base class for all kdlab errors."""


class ShapeError(KdlabError):
    """Operands or arguments have incompatible shapes or lengths."""


class ConfigError(KdlabError):
    """A configuration value violates its contract."""


class DataError(KdlabError):
    """Input data is malformed or out of the declared range."""


class NumericError(KdlabError):
    """A computation hit a degenerate or non-finite numeric state."""


class MeasurementError(DataError):
    """Not enough measured data to report on (e.g. too few timed epochs)."""
