"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: DataError -> 1, ConfigError (and
subclasses) -> 2, NumericalError -> 3.
"""


class MomentfitError(Exception):
    """Base class for all package errors."""


class DataError(MomentfitError):
    """Invalid or degenerate input data (bad dimensions, empty clouds, ...)."""


class SurfaceNotFoundError(DataError):
    """No zero crossing of the implicit function inside the sampling box."""


class ConfigError(MomentfitError):
    """Invalid specification, configuration, or serialized payload."""


class CapacityError(ConfigError):
    """Requested feature family exceeds the supported size guardrail."""


class PlanFormatError(ConfigError):
    """Persisted compensation plan is malformed or has an unknown version."""


class NumericalError(MomentfitError):
    """Numerical failure: singular compensation blocks, SVD breakdown, ..."""
