"""Exception types shared across the package."""


class WarpmarkError(Exception):
    """Base class for all package errors."""


class DimensionError(WarpmarkError, ValueError):
    pass


class DomainError(WarpmarkError, ValueError):
    pass


class UsageError(WarpmarkError, ValueError):
    pass


class NumericError(WarpmarkError, FloatingPointError):
    pass


class SingularSystemError(WarpmarkError, ValueError):
    pass


class ConfigError(WarpmarkError, ValueError):
    pass


class FormatError(WarpmarkError, ValueError):
    pass


class ParseError(WarpmarkError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class CheckpointError(WarpmarkError, ValueError):
    pass


class TrainingAborted(NumericError):
    """Raised when a training phase hits a non-finite value.

    ``model`` holds the last good landmarker, which has also been written
    back to the checkpoint directory when one is configured.
    """

    def __init__(self, message, model=None):
        super().__init__(message)
        self.model = model
