"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class NNWMError(Exception):
    exit_code = 1


class ConfigError(NNWMError, ValueError):
    """Invalid configuration or incompatible shapes/sizes."""

    exit_code = 2


class UsageError(NNWMError, RuntimeError):
    """API used out of order (e.g. backward on stale activations)."""

    exit_code = 2


class DataError(NNWMError, IOError):
    """Dataset or checkpoint ingestion failure."""

    exit_code = 3


class NumericError(NNWMError, ArithmeticError):
    """Non-finite value produced during computation."""

    exit_code = 4
