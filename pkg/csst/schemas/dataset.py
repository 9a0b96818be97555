"""
Dataset Schemas for the CSST pipeline
Numeric containers for POIs and datasets (plain dataclasses over numpy arrays).
"""

from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from csst.core.errors import DataError

PORTRAIT_TOLERANCE = 1e-6


@dataclass(frozen=True, eq=False)
class Poi:
    """One point of interest.

    v_a = [area_m2, traffic_level, loc_feat_1..n]; v_c = age shares then gender shares;
    reports = per-interval GPS-reported counts; label = true flow (None when hidden).
    """

    id: str
    lon: float
    lat: float
    v_a: np.ndarray
    v_c: np.ndarray
    reports: np.ndarray
    label: Optional[float] = None

    @property
    def area(self) -> float:
        return float(self.v_a[0])

    @property
    def total_reports(self) -> float:
        return float(np.sum(self.reports))

    @property
    def labeled(self) -> bool:
        return self.label is not None

    def without_label(self) -> "Poi":
        return replace(self, label=None)

    def validate(self, portrait_groups: Sequence[int], tolerance: float = PORTRAIT_TOLERANCE) -> None:
        if not (-180.0 <= self.lon <= 180.0 and -90.0 <= self.lat <= 90.0):
            raise DataError(f"POI {self.id}: invalid coordinates ({self.lon}, {self.lat})")
        if self.v_a.size == 0 or self.area <= 0:
            raise DataError(f"POI {self.id}: area must be positive")
        if np.any(self.reports < 0):
            raise DataError(f"POI {self.id}: negative report count")
        if self.label is not None and self.label < 0:
            raise DataError(f"POI {self.id}: negative label")
        if self.v_c.size != sum(portrait_groups):
            raise DataError(f"POI {self.id}: portrait has {self.v_c.size} entries, expected {sum(portrait_groups)}")
        if np.any(self.v_c < 0) or np.any(self.v_c > 1):
            raise DataError(f"POI {self.id}: portrait shares outside [0, 1]")
        for group in split_portrait(self.v_c, portrait_groups):
            if abs(group.sum() - 1.0) > tolerance:
                raise DataError(f"POI {self.id}: portrait group sums to {group.sum():.6f}")


def split_portrait(v_c: np.ndarray, portrait_groups: Sequence[int]) -> List[np.ndarray]:
    bounds = np.cumsum([0, *portrait_groups])
    return [v_c[bounds[i]:bounds[i + 1]] for i in range(len(portrait_groups))]


@dataclass(frozen=True, eq=False)
class Dataset:
    """POIs plus the observation window and where they came from."""

    pois: Tuple[Poi, ...]
    window: Tuple[int, ...]
    portrait_groups: Tuple[int, ...] = (4, 2)
    provenance: Dict[str, Any] = field(default_factory=dict)
    truth: Optional[Dict[str, float]] = None

    def __post_init__(self):
        ids = [p.id for p in self.pois]
        if len(set(ids)) != len(ids):
            seen, dupes = set(), []
            for pid in ids:
                if pid in seen:
                    dupes.append(pid)
                seen.add(pid)
            raise DataError(f"duplicate POI ids: {sorted(set(dupes))[:5]}")
        object.__setattr__(self, "_index", {pid: i for i, pid in enumerate(ids)})

    def __len__(self) -> int:
        return len(self.pois)

    def __getitem__(self, poi_id: str) -> Poi:
        try:
            return self.pois[self._index[poi_id]]
        except KeyError:
            raise DataError(f"unknown POI id: {poi_id}") from None

    def __contains__(self, poi_id: str) -> bool:
        return poi_id in self._index

    @property
    def ids(self) -> List[str]:
        return [p.id for p in self.pois]

    def position(self, poi_id: str) -> int:
        return self._index[poi_id]

    @property
    def labeled_ids(self) -> List[str]:
        return [p.id for p in self.pois if p.labeled]

    @property
    def n_intervals(self) -> int:
        return len(self.window)

    @property
    def dims(self) -> Tuple[int, int, int]:
        """(D_a, D_c, D_r)."""
        first = self.pois[0]
        return first.v_a.size, first.v_c.size, first.reports.size

    def unlabeled(self) -> "Dataset":
        """Same POIs with labels hidden (the pretraining view)."""
        return replace(self, pois=tuple(p.without_label() for p in self.pois), truth=None)

    def labels(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self[i].label for i in ids], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class FeatureTable:
    """Encoder-ready arrays aligned with `ids` (one row per POI)."""

    ids: Tuple[str, ...]
    v_a: np.ndarray
    v_c: np.ndarray
    reports: np.ndarray

    def __post_init__(self):
        n = len(self.ids)
        for name in ("v_a", "v_c", "reports"):
            array = getattr(self, name)
            if array.ndim != 2 or array.shape[0] != n:
                raise DataError(f"feature table {name} has shape {array.shape}, expected ({n}, *)")
        object.__setattr__(self, "_rows", {pid: i for i, pid in enumerate(self.ids)})

    def row(self, poi_id: str) -> int:
        try:
            return self._rows[poi_id]
        except KeyError:
            raise DataError(f"unknown POI id: {poi_id}") from None

    def rows(self, ids: Sequence[str]) -> np.ndarray:
        return np.array([self.row(i) for i in ids], dtype=np.int64)

    def with_row(self, poi_id: str, *, v_a: Optional[np.ndarray] = None, v_c: Optional[np.ndarray] = None,
                 reports: Optional[np.ndarray] = None) -> "FeatureTable":
        """Copy with one POI's features replaced."""
        i = self.row(poi_id)
        arrays = {"v_a": self.v_a.copy(), "v_c": self.v_c.copy(), "reports": self.reports.copy()}
        for name, value in (("v_a", v_a), ("v_c", v_c), ("reports", reports)):
            if value is not None:
                arrays[name][i] = value
        return FeatureTable(ids=self.ids, **arrays)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.v_a.shape[1], self.v_c.shape[1], self.reports.shape[1]
