"""
Run configuration loading
YAML file + `section.key=value` overrides -> validated RunConfig.
"""

from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import yaml
from pydantic import ValidationError

from csst.core.errors import ConfigError
from csst.schemas.config import RunConfig


def _parse_override(item: str) -> tuple:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value")
    key, raw = item.split("=", 1)
    key = key.strip()
    if not key or any(not part for part in key.split(".")):
        raise ConfigError(f"override {item!r} has an empty key")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {item!r}: unparseable value") from exc
    return key.split("."), value


def apply_overrides(payload: Dict[str, Any], overrides: Iterable[str]) -> Dict[str, Any]:
    """Set each dotted key in a copy of `payload`; later overrides win."""
    result = dict(payload)
    for item in overrides:
        path, value = _parse_override(item)
        node = result
        for part in path[:-1]:
            child = node.get(part)
            if child is None:
                child = {}
            elif not isinstance(child, dict):
                raise ConfigError(f"override {item!r}: {part} is not a section")
            else:
                child = dict(child)
            node[part] = child
            node = child
        node[path[-1]] = value
    return result


def read_yaml(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}", detail={"path": str(path)})
    try:
        payload = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if payload is None:
        return {}
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return payload


def load_run_config(path: Optional[Path] = None, overrides: Iterable[str] = ()) -> RunConfig:
    overrides = list(overrides)
    payload = read_yaml(path) if path else {}
    for recorded in ("overrides", "source_file", "config_hash"):
        payload.pop(recorded, None)
    payload = apply_overrides(payload, overrides)
    payload["overrides"] = overrides
    payload["source_file"] = str(path) if path else None
    try:
        return RunConfig.model_validate(payload)
    except ValidationError as exc:
        problems = [f"{'.'.join(str(p) for p in e['loc'])}: {e['msg']}" for e in exc.errors()]
        raise ConfigError(f"invalid run config: {'; '.join(problems)}", detail={"errors": problems}) from exc


def dump_run_config(cfg: RunConfig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = cfg.model_dump(mode="json")
    payload["config_hash"] = cfg.config_hash()
    path.write_text(yaml.safe_dump(payload, sort_keys=True), encoding="utf-8")
    return path
