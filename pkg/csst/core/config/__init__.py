"""
Configuration module
"""

from .run_config import dump_run_config, load_run_config
from .settings import Settings, reload_settings, settings

__all__ = ["settings", "Settings", "reload_settings", "load_run_config", "dump_run_config"]
