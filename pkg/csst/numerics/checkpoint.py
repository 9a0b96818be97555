"""
Checkpoint container
numpy .npz holding one little-endian float64 array per parameter plus a JSON metadata blob.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np

from csst.core.errors import CheckpointError
from csst.numerics.optimizer import OptimizerState
from csst.numerics.params import ParamStore

FORMAT_NAME = "csst-checkpoint"
FORMAT_VERSION = 1
_RESERVED = ("__format__", "__version__", "__meta__")


@dataclass
class Checkpoint:
    """Parameters, optimizer slots, RNG state and free-form metadata."""

    params: ParamStore
    meta: Dict[str, Any] = field(default_factory=dict)
    optimizer_state: Optional[OptimizerState] = None
    rng_state: Optional[Dict[str, Any]] = None

    @property
    def config_hash(self) -> Optional[str]:
        return self.meta.get("config_hash")


def rng_state(rng: np.random.Generator) -> Dict[str, Any]:
    return rng.bit_generator.state


def restore_rng(state: Dict[str, Any]) -> np.random.Generator:
    bit_generator = getattr(np.random, state["bit_generator"])()
    bit_generator.state = state
    return np.random.Generator(bit_generator)


def save_checkpoint(path: Path, checkpoint: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: Dict[str, np.ndarray] = {}
    for name, value in checkpoint.params.items():
        if name in _RESERVED or name.startswith("__opt__/"):
            raise CheckpointError(f"reserved parameter name: {name}")
        arrays[name] = np.ascontiguousarray(value, dtype="<f8")
    meta = dict(checkpoint.meta)
    if checkpoint.optimizer_state is not None:
        arrays.update({k: np.ascontiguousarray(v, dtype="<f8")
                       for k, v in checkpoint.optimizer_state.to_arrays().items()})
        meta["optimizer_step"] = checkpoint.optimizer_state.step
    if checkpoint.rng_state is not None:
        meta["rng_state"] = checkpoint.rng_state
    meta["param_names"] = list(checkpoint.params.keys())

    arrays["__format__"] = np.array(FORMAT_NAME)
    arrays["__version__"] = np.array(FORMAT_VERSION)
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True, default=str))
    with path.open("wb") as handle:
        np.savez(handle, **arrays)
    return path


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}", detail={"path": str(path)})
    try:
        with np.load(path, allow_pickle=False) as archive:
            contents = {name: archive[name] for name in archive.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc

    if str(contents.get("__format__", "")) != FORMAT_NAME:
        raise CheckpointError(f"{path} is not a {FORMAT_NAME} file")
    version = int(contents["__version__"])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", detail={"version": version})
    meta = json.loads(str(contents["__meta__"]))

    tensors = {}
    for name in meta.get("param_names", []):
        if name not in contents:
            raise CheckpointError(f"checkpoint missing tensor {name}")
        array = contents[name]
        if array.dtype != np.dtype("<f8"):
            raise CheckpointError(f"tensor {name} has dtype {array.dtype}, expected <f8")
        tensors[name] = array
    optimizer_state = None
    if "optimizer_step" in meta:
        optimizer_state = OptimizerState.from_arrays(int(meta["optimizer_step"]), contents)
    return Checkpoint(
        params=ParamStore(tensors),
        meta=meta,
        optimizer_state=optimizer_state,
        rng_state=meta.get("rng_state"),
    )
