"""
Exception hierarchy for the CSST pipeline.
Every error carries the process exit code the CLI reports for it.
"""

from typing import Optional


class CSSTError(Exception):
    """Base class for all pipeline errors."""

    exit_code: int = 1

    def __init__(self, message: str, *, detail: Optional[dict] = None):
        super().__init__(message)
        self.message = message
        self.detail = detail or {}

    def to_dict(self) -> dict:
        return {
            "error_type": type(self).__name__,
            "message": self.message,
            "exit_code": self.exit_code,
            **self.detail,
        }


class ConfigError(CSSTError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class CheckpointError(ConfigError):
    """Checkpoint missing, malformed, or incompatible with the run config."""


class DataError(CSSTError):
    """Malformed input data or an impossible split."""

    exit_code = 3


class UnaugmentableError(DataError):
    """No positive pool exists for an anchor, even after the area-bin fallback."""


class NumericError(CSSTError):
    """Non-finite value or shape violation inside the numerics core."""

    exit_code = 4


class ShapeError(NumericError):
    """Operand shapes do not match."""
