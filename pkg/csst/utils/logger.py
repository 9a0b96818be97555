"""
Structured logger for the CSST pipeline
JSON or human-readable records with keyword extras, level counters and timing contexts.
"""

import json
import logging
import logging.handlers
import time
import traceback
from contextlib import contextmanager
from datetime import datetime, timezone
from functools import wraps
from pathlib import Path
from typing import Any, Dict, List, Optional

from csst.core.config.settings import settings


class CSSTLoggerConfig:
    """Configuration for the CSST logger."""

    def __init__(
        self,
        log_level: str = "INFO",
        log_format: str = "standard",
        enable_file_logging: bool = False,
        enable_console_logging: bool = True,
        log_directory: str = "logs",
        max_file_size: int = 10 * 1024 * 1024,  # 10MB
        backup_count: int = 5,
        enable_metrics: bool = True,
    ):
        self.log_level = log_level.upper()
        self.log_format = log_format
        self.enable_file_logging = enable_file_logging
        self.enable_console_logging = enable_console_logging
        self.log_directory = Path(log_directory)
        self.max_file_size = max_file_size
        self.backup_count = backup_count
        self.enable_metrics = enable_metrics

    @classmethod
    def from_settings(cls) -> "CSSTLoggerConfig":
        return cls(
            log_level=settings.log_level,
            log_format=settings.log_format,
            enable_file_logging=settings.log_to_file,
            log_directory=settings.log_directory,
        )


class JSONFormatter(logging.Formatter):
    """One JSON object per record; keyword extras are merged at top level."""

    def format(self, record: logging.LogRecord) -> str:
        log_entry = {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }
        if hasattr(record, "extra_data"):
            log_entry.update(record.extra_data)
        if record.exc_info:
            log_entry["exception"] = {
                "type": record.exc_info[0].__name__,
                "message": str(record.exc_info[1]),
                "traceback": traceback.format_exception(*record.exc_info),
            }
        return json.dumps(log_entry, default=str)


class StandardFormatter(logging.Formatter):
    """Human-readable records with extras appended as key=value pairs."""

    def __init__(self):
        super().__init__("%(asctime)s - %(name)s - %(levelname)s - %(message)s")

    def format(self, record: logging.LogRecord) -> str:
        line = super().format(record)
        extra = getattr(record, "extra_data", None)
        if extra:
            pairs = " ".join(f"{key}={_short(value)}" for key, value in extra.items())
            line = f"{line} | {pairs}"
        return line


def _short(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


class CSSTLogger:
    """Pipeline logger with structured extras and level metrics."""

    _instance = None

    def __new__(cls, config: Optional[CSSTLoggerConfig] = None):
        """Singleton pattern implementation."""
        if cls._instance is None:
            cls._instance = super().__new__(cls)
            cls._instance._initialize(config or CSSTLoggerConfig.from_settings())
        return cls._instance

    def _initialize(self, config: CSSTLoggerConfig):
        self._config = config
        self._run_handlers: List[logging.Handler] = []
        self._setup_logger()
        self._setup_metrics()

    def _formatter(self) -> logging.Formatter:
        if self._config.log_format == "json":
            return JSONFormatter()
        return StandardFormatter()

    def _setup_logger(self):
        """Setup the root pipeline logger with handlers."""
        self._logger = logging.getLogger("csst")
        self._logger.setLevel(getattr(logging, self._config.log_level, logging.INFO))
        self._logger.propagate = False
        self._logger.handlers.clear()

        formatter = self._formatter()

        if self._config.enable_console_logging:
            console_handler = logging.StreamHandler()
            console_handler.setFormatter(formatter)
            self._logger.addHandler(console_handler)

        if self._config.enable_file_logging:
            self._config.log_directory.mkdir(parents=True, exist_ok=True)
            self._add_file_handlers(self._config.log_directory)

    def _add_file_handlers(self, directory: Path) -> List[logging.Handler]:
        formatter = self._formatter()
        file_handler = logging.handlers.RotatingFileHandler(
            directory / "csst.log",
            maxBytes=self._config.max_file_size,
            backupCount=self._config.backup_count,
        )
        file_handler.setFormatter(formatter)

        # Error-specific file handler
        error_handler = logging.handlers.RotatingFileHandler(
            directory / "csst_errors.log",
            maxBytes=self._config.max_file_size,
            backupCount=self._config.backup_count,
        )
        error_handler.setLevel(logging.ERROR)
        error_handler.setFormatter(formatter)

        for handler in (file_handler, error_handler):
            self._logger.addHandler(handler)
        return [file_handler, error_handler]

    def _setup_metrics(self):
        self._metrics = {
            "total_logs": 0,
            "error_count": 0,
            "warning_count": 0,
            "info_count": 0,
            "debug_count": 0,
            "start_time": datetime.now(timezone.utc),
            "last_error": None,
        }

    def configure(self, log_level: Optional[str] = None, log_format: Optional[str] = None):
        """Re-apply level/format after CLI flags change them."""
        if log_level:
            self._config.log_level = log_level.upper()
        if log_format:
            self._config.log_format = log_format
        self._setup_logger()
        for handler in self._run_handlers:
            handler.setFormatter(self._formatter())
            self._logger.addHandler(handler)

    def attach_run_directory(self, directory: Path):
        """Mirror all records into `<run dir>/logs/`."""
        log_dir = Path(directory) / "logs"
        log_dir.mkdir(parents=True, exist_ok=True)
        self._run_handlers.extend(self._add_file_handlers(log_dir))

    def detach_run_directory(self):
        for handler in self._run_handlers:
            self._logger.removeHandler(handler)
            handler.close()
        self._run_handlers = []

    def _update_metrics(self, level: str, extra_data: Optional[Dict[str, Any]] = None):
        if not self._config.enable_metrics:
            return
        self._metrics["total_logs"] += 1
        level_key = f"{level.lower()}_count"
        if level_key in self._metrics:
            self._metrics[level_key] += 1
        if level == "ERROR" and extra_data:
            self._metrics["last_error"] = {
                "timestamp": datetime.now(timezone.utc).isoformat(),
                "type": extra_data.get("error_type", "Unknown"),
                "message": extra_data.get("error_message", ""),
            }

    def _log(self, level: str, message: str, extra_data: Optional[Dict[str, Any]] = None):
        self._update_metrics(level, extra_data)
        if extra_data:
            self._logger.log(getattr(logging, level), message, extra={"extra_data": extra_data}, stacklevel=3)
        else:
            self._logger.log(getattr(logging, level), message, stacklevel=3)

    # Public logging methods
    def debug(self, message: str, **kwargs):
        self._log("DEBUG", message, kwargs or None)

    def info(self, message: str, **kwargs):
        self._log("INFO", message, kwargs or None)

    def warning(self, message: str, **kwargs):
        self._log("WARNING", message, kwargs or None)

    def error(self, message: str, error: Optional[Exception] = None, **kwargs):
        """Log error message with optional exception."""
        extra_data = dict(kwargs)
        if error:
            extra_data.update({
                "error_type": type(error).__name__,
                "error_message": str(error),
            })
            if settings.debug:
                extra_data["traceback"] = traceback.format_exc()
        self._log("ERROR", message, extra_data)

    # Pipeline-specific logging methods
    def training_step(self, stage: str, step: int, loss: float, **kwargs):
        self.debug(f"{stage} step {step}", stage=stage, step=step, loss=loss, category="training_step", **kwargs)

    def stage_summary(self, stage: str, **kwargs):
        self.info(f"{stage} finished", stage=stage, category="stage_summary", **kwargs)

    @contextmanager
    def performance_context(self, operation: str, **metadata):
        """Context manager timing a block and logging its duration."""
        start = time.perf_counter()
        try:
            yield
        finally:
            duration = time.perf_counter() - start
            self.info(f"Performance: {operation}", operation=operation, duration=duration,
                      category="performance", **metadata)

    def get_metrics(self) -> Dict[str, Any]:
        return dict(self._metrics)


def log_function_calls(func):
    """Decorator logging entry, completion and failure of a pipeline stage."""

    @wraps(func)
    def wrapper(*args, **kwargs):
        logger = CSSTLogger()
        func_name = f"{func.__module__}.{func.__name__}"
        logger.debug(f"Calling function: {func_name}", function=func_name)
        try:
            with logger.performance_context(f"function_call:{func.__name__}"):
                return func(*args, **kwargs)
        except Exception as e:
            logger.error(f"Function failed: {func_name}", error=e, function=func_name)
            raise

    return wrapper


def get_logger(name: Optional[str] = None) -> CSSTLogger:
    """Get the global pipeline logger (name kept for call-site readability)."""
    return CSSTLogger()
