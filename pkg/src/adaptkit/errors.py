"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, NumericalError -> 2,
StorageError -> 3.
"""


class AdaptkitError(Exception):
    """Base class for all package errors."""


class ConfigError(AdaptkitError):
    """Invalid configuration, arguments, or preconditions."""


class ShapeError(ConfigError):
    """Tensor/batch shape mismatch."""


class NumericalError(AdaptkitError):
    """Non-finite values or numerically degenerate state."""


class StorageError(AdaptkitError):
    """Checkpoint/dataset file I/O or format problems."""
