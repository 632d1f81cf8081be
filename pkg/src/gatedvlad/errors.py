"""Exception types shared across the package."""


class GatedVladError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(GatedVladError):
    """Invalid argument or inconsistent input data."""


class ShapeError(ValidationError):
    """Array dimensions do not match the declared layout."""


class FormatError(GatedVladError):
    """A serialized container has a wrong magic header or version."""


class CorruptionError(GatedVladError):
    """A serialized container is truncated or has garbled contents."""


class IncompatibilityError(GatedVladError):
    """Checkpoints or ensemble members do not fit together."""


class TrainingError(GatedVladError):
    """Training diverged or could not proceed."""
