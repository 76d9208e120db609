"""Shared exception taxonomy, mirrored by the CLI exit codes.

ConfigError -> exit 2, NumericsError -> exit 3, DataFormatError / OSError -> exit 4.
"""


class AncorError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(AncorError):
    """Invalid configuration: bad value, unknown key, inconsistent flags."""


class NumericsError(AncorError):
    """Numerical failure: degenerate vectors, non-finite values, bad shapes."""


class DimensionError(NumericsError):
    """Operand shapes do not conform."""


class DegenerateVectorError(NumericsError):
    """Vector norm below the normalization threshold."""


class ParallelDegenerateError(NumericsError):
    """Embedding positively parallel to its class weight; angular map undefined."""


class DataFormatError(AncorError):
    """Malformed persistent artifact (CSV, checkpoint, manifest)."""
