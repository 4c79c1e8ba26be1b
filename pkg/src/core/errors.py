"""
Exception taxonomy for the tenor-selection pipeline.
Each category maps to a distinct CLI exit code.
"""
from typing import Optional


class NdfError(Exception):
    """Base class for all pipeline errors."""

    exit_code: int = 1


class ParseError(NdfError, ValueError):
    """Malformed input file."""

    exit_code = 2

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = ""
        if path is not None:
            location = f"{path}"
            if line is not None:
                location += f":{line}"
            location += ": "
        super().__init__(f"{location}{message}")


class ValidationError(NdfError, ValueError):
    """Value violates a precondition (non-positive rate, duplicate date, ...)."""

    exit_code = 3


class AlignmentError(ValidationError):
    """Inputs cannot be placed on a common calendar."""


class ConfigError(NdfError, ValueError):
    """Invalid configuration."""

    exit_code = 4


class ShapeError(NdfError, ValueError):
    """Tensor or panel shapes are incompatible."""

    exit_code = 5


class ComputeError(NdfError):
    """Numerical failure: non-finite values, divergence, undefined trades."""

    exit_code = 5

    def __init__(self, message: str, day: Optional[str] = None):
        self.day = day
        if day is not None:
            message = f"[{day}] {message}"
        super().__init__(message)


class ArtifactError(NdfError, OSError):
    """Upstream artifact missing or unreadable."""

    exit_code = 6

    def __init__(self, message: str, producer: Optional[str] = None):
        self.producer = producer
        if producer:
            message = f"{message} (run `{producer}` first)"
        super().__init__(message)
