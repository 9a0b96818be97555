"""
Core module initialization
"""

from .config import Settings, load_run_config, settings
from .errors import CheckpointError, ConfigError, CSSTError, DataError, NumericError, ShapeError, UnaugmentableError

__all__ = [
    "settings",
    "Settings",
    "load_run_config",
    "CSSTError",
    "ConfigError",
    "CheckpointError",
    "DataError",
    "UnaugmentableError",
    "NumericError",
    "ShapeError",
]
