"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError and its
subclasses -> 3, DivergenceError -> 4.
"""


class RlmlError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(RlmlError):
    """Invalid configuration value or violated config invariant."""


class DataError(RlmlError):
    """Malformed or unusable input data."""


class ContextOverflowError(DataError):
    """A sequence does not fit into the model's context window."""


class CheckpointError(DataError):
    """Corrupt, truncated or incompatible checkpoint file."""


class DivergenceError(RlmlError):
    """Training produced non-finite values."""
