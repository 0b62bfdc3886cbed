"""Named exceptions shared across the package.

ValidationError subclasses map to CLI exit code 2, NumericalError to 3.
"""


class TriflowError(Exception):
    pass


class ValidationError(TriflowError):
    pass


class UnknownTaskError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class DatasetError(ValidationError):
    pass


class CheckpointError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class NumericalError(TriflowError):
    """Non-finite value encountered during a numerical computation."""
