"""
Per-run artifact directories: resolved config, manifest with input hashes, logs.
"""

import hashlib
import json
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional

from csst.core.config.run_config import dump_run_config
from csst.core.config.settings import settings
from csst.schemas.config import RunConfig
from csst.utils.logger import get_logger

logger = get_logger(__name__)

MANIFEST_NAME = "run_manifest.json"
RESOLVED_CONFIG_NAME = "resolved_config.yaml"


def sha256_file(path: Path, chunk_size: int = 1 << 20) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(chunk_size), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class RunDirectory:
    """Owns one run's output directory; use as a context manager around a stage."""

    def __init__(self, cfg: RunConfig, command: str, path: Optional[Path] = None):
        self.cfg = cfg
        self.command = command
        if path is None:
            if cfg.output_dir:
                path = Path(cfg.output_dir)
            else:
                stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%f")
                path = Path(settings.output_root) / f"{stamp}-{command}-{cfg.short_hash()}"
        self.path = Path(path)
        self.inputs: Dict[str, str] = {}
        self.outputs: Dict[str, str] = {}
        self.extra: Dict[str, Any] = {}
        self.started_at: Optional[str] = None

    def __enter__(self) -> "RunDirectory":
        self.path.mkdir(parents=True, exist_ok=True)
        self.started_at = _now()
        logger.attach_run_directory(self.path)
        dump_run_config(self.cfg, self.path / RESOLVED_CONFIG_NAME)
        logger.info("Run directory ready", path=str(self.path), command=self.command,
                    config_hash=self.cfg.short_hash())
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        status = "ok" if exc is None else f"failed: {type(exc).__name__}"
        self.write_manifest(status)
        logger.detach_run_directory()
        return False

    def file(self, name: str) -> Path:
        return self.path / name

    def record_input(self, path: Path, label: Optional[str] = None) -> None:
        path = Path(path)
        if path.exists() and path.is_file():
            self.inputs[label or str(path)] = sha256_file(path)

    def record_output(self, label: str, path: Path) -> Path:
        self.outputs[label] = str(Path(path).relative_to(self.path) if Path(path).is_relative_to(self.path)
                                  else path)
        return Path(path)

    def write_manifest(self, status: str = "ok") -> Path:
        manifest = {
            "command": self.command,
            "argv": list(sys.argv),
            "config_hash": self.cfg.config_hash(),
            "seed": self.cfg.seed,
            "package": settings.app_name,
            "version": settings.app_version,
            "python": sys.version.split()[0],
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "started_at": self.started_at,
            "finished_at": _now(),
            "status": status,
            **self.extra,
        }
        path = self.path / MANIFEST_NAME
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path
