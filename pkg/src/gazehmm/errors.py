class GazeHmmError(Exception):
    """Base class for data errors raised by this package."""


class ParseError(GazeHmmError):
    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ValidationError(GazeHmmError):
    pass


class ModelError(GazeHmmError):
    """Invalid numerical input to a model operation (singular covariance,
    dimension mismatch, no admissible state path, ...)."""
