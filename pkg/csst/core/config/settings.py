"""
Centralized settings management for the CSST pipeline
"""

import os
from dataclasses import dataclass, field


# Load from environment or use defaults
def get_env_bool(key: str, default: bool = False) -> bool:
    """Get boolean value from environment variable"""
    value = os.getenv(key, str(default)).lower()
    return value in ("true", "1", "yes", "on")


def get_env_int(key: str, default: int = 0) -> int:
    """Get integer value from environment variable"""
    try:
        return int(os.getenv(key, str(default)))
    except ValueError:
        return default


def get_env_float(key: str, default: float = 0.0) -> float:
    """Get float value from environment variable"""
    try:
        return float(os.getenv(key, str(default)))
    except ValueError:
        return default


@dataclass
class Settings:
    """Process-level settings (everything a run config does not own)"""

    # App Info
    app_name: str = "csst"
    app_version: str = "1.0.0"

    # Environment
    environment: str = field(default_factory=lambda: os.getenv("CSST_ENVIRONMENT", "development"))
    debug: bool = field(default_factory=lambda: get_env_bool("CSST_DEBUG", False))
    log_level: str = field(default_factory=lambda: os.getenv("CSST_LOG_LEVEL", "INFO"))
    log_format: str = field(default_factory=lambda: os.getenv("CSST_LOG_FORMAT", "standard"))
    log_to_file: bool = field(default_factory=lambda: get_env_bool("CSST_LOG_TO_FILE", False))
    log_directory: str = field(default_factory=lambda: os.getenv("CSST_LOG_DIRECTORY", "logs"))

    # Outputs
    output_root: str = field(default_factory=lambda: os.getenv("CSST_OUTPUT_ROOT", "./runs"))

    # Execution
    workers: int = field(default_factory=lambda: get_env_int("CSST_WORKERS", 1))
    progress: bool = field(default_factory=lambda: get_env_bool("CSST_PROGRESS", True))

    # Numerics
    finite_check: bool = field(default_factory=lambda: get_env_bool("CSST_FINITE_CHECK", True))
    fd_step: float = field(default_factory=lambda: get_env_float("CSST_FD_STEP", 1e-5))


# Global settings instance
settings = Settings()


def reload_settings() -> Settings:
    """Re-read the environment (used by the CLI after flags touch env vars)."""
    global settings
    fresh = Settings()
    settings.__dict__.update(fresh.__dict__)
    return settings
