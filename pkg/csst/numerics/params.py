"""
Named parameter storage
Dense float64 tensors addressed by slash-separated names ("f_a/layer0/W").
"""

import zlib
from collections.abc import Mapping
from typing import Dict, Iterable, Iterator, Optional, Tuple

import numpy as np

from csst.core.errors import NumericError, ShapeError

Tensor = np.ndarray


def as_tensor(value, name: str = "tensor") -> Tensor:
    """Copy `value` into a contiguous little-endian float64 array, rejecting NaN/Inf."""
    array = np.ascontiguousarray(np.asarray(value, dtype="<f8"))
    if not np.all(np.isfinite(array)):
        raise NumericError(f"non-finite entries in {name}", detail={"tensor": name})
    return array


class ParamStore(Mapping):
    """Immutable-by-convention map name -> tensor; updates return new stores."""

    def __init__(self, tensors: Optional[Dict[str, Tensor]] = None, *, validate: bool = True):
        self._tensors: Dict[str, Tensor] = {}
        for name in sorted(tensors or {}):
            value = tensors[name]
            self._tensors[name] = as_tensor(value, name) if validate else value

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._tensors.items())
        return f"ParamStore({shapes})"

    @property
    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {name: tuple(t.shape) for name, t in self._tensors.items()}

    def size(self) -> int:
        return int(sum(t.size for t in self._tensors.values()))

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self._tensors.items()}, validate=False)

    def zeros_like(self) -> "ParamStore":
        return ParamStore({k: np.zeros_like(v) for k, v in self._tensors.items()}, validate=False)

    def select(self, prefixes: Iterable[str]) -> "ParamStore":
        prefixes = tuple(prefixes)
        return ParamStore({k: v for k, v in self._tensors.items() if k.startswith(prefixes)}, validate=False)

    def exclude(self, prefixes: Iterable[str]) -> "ParamStore":
        prefixes = tuple(prefixes)
        return ParamStore({k: v for k, v in self._tensors.items() if not k.startswith(prefixes)}, validate=False)

    def merged(self, other: Mapping) -> "ParamStore":
        """Return a store where `other` overrides matching names (shapes must agree)."""
        tensors = dict(self._tensors)
        for name, value in other.items():
            if name in tensors and tuple(np.shape(value)) != tensors[name].shape:
                raise ShapeError(
                    f"shape mismatch for {name}: {np.shape(value)} vs {tensors[name].shape}",
                    detail={"param": name},
                )
            tensors[name] = as_tensor(value, name)
        return ParamStore(tensors, validate=False)

    def replace(self, name: str, value: Tensor) -> "ParamStore":
        return self.merged({name: value})

    def check_aligned(self, other: Mapping, what: str = "gradient") -> None:
        if set(other) != set(self._tensors):
            missing = sorted(set(self._tensors) ^ set(other))
            raise ShapeError(f"{what} names differ from parameters: {missing[:5]}", detail={"names": missing})
        for name, value in self._tensors.items():
            if tuple(np.shape(other[name])) != value.shape:
                raise ShapeError(
                    f"{what} shape mismatch for {name}: {np.shape(other[name])} vs {value.shape}",
                    detail={"param": name},
                )

    def bit_equal(self, other: "ParamStore") -> bool:
        if list(self) != list(other):
            return False
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes() for k in self
        )

    def groups(self) -> Dict[str, int]:
        """Parameter count per top-level prefix."""
        counts: Dict[str, int] = {}
        for name, value in self._tensors.items():
            group = name.split("/", 1)[0]
            counts[group] = counts.get(group, 0) + int(value.size)
        return counts


def init_affine(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tuple[Tensor, Tensor]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases."""
    bound = 1.0 / np.sqrt(fan_in)
    weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    bias = rng.uniform(-bound, bound, size=(fan_out,))
    return weight, bias


def derive_rng(seed: int, *keys: str) -> np.random.Generator:
    """Independent PCG64 stream for (seed, keys); the same pair always yields the same stream."""
    entropy = [int(seed)] + [zlib.crc32(k.encode("utf-8")) for k in keys]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
