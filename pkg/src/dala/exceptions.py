"""Exception taxonomy shared by all dala modules.

Shape/value problems subclass ValueError so generic callers keep working;
misuse of the API (backward on a detached tensor, stepping an optimizer
without gradients) subclasses RuntimeError.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ConfigurationError(ValueError):
    """A configuration value is outside its documented domain."""


class InputError(ValueError):
    """Runtime data (labels, masks, map sizes) violates a precondition."""


class UsageError(RuntimeError):
    """The API was called in a state it does not support."""


class NumericsError(ArithmeticError):
    """An operation produced NaN or Inf; results are not trustworthy."""


class CheckpointFormatError(ValueError):
    """A checkpoint file is corrupt, truncated, or does not match the model."""
