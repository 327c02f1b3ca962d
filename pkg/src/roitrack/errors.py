"""Exception types shared across the package."""


class NumericError(ValueError):
    """Non-finite or degenerate values where well-defined ones are required."""


class EmptyRoiError(ValueError):
    """A binarized region of interest contains no foreground."""


class InvalidStateError(RuntimeError):
    """An operation was invoked on a session in a state that does not allow it."""


class RegistrationFailed(RuntimeError):
    """Segmentation produced no usable region; the caller retries on a later frame."""
