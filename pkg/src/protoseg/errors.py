"""Exception types shared across the package."""


class ProtosegError(Exception):
    """Base class for package errors."""


class ConfigError(ProtosegError):
    """Invalid configuration (bad hyperparameter, divisibility violation, ...)."""


class InvalidInputError(ProtosegError):
    """Malformed runtime input (shape mismatch, non-binary mask, ...)."""


class VolumeIOError(ProtosegError):
    """Volume file could not be read or written; message carries the path."""


class DivergenceError(ProtosegError):
    """Training produced a non-finite loss."""

    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"non-finite loss at iteration {iteration}")
