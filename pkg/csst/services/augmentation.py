"""
Positive-pair sampling for contrastive pretraining.

POIs are binned by quantiles of their area and of their total GPS reports; the
positives of a target are drawn from the POIs sharing both bins.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from csst.core.errors import ConfigError, DataError, UnaugmentableError
from csst.schemas.dataset import Poi
from csst.utils.logger import get_logger

logger = get_logger(__name__)


def quantile_bins(values: Sequence[float], n_bins: int) -> np.ndarray:
    """Cut points at q = j / n_bins (j = 1..n_bins-1), linear interpolation between order statistics."""
    if n_bins < 1:
        raise ConfigError(f"n_bins must be >= 1, got {n_bins}")
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise DataError("cannot bin an empty value list")
    if n_bins == 1:
        return np.empty(0)
    qs = np.arange(1, n_bins) / n_bins
    return np.quantile(values, qs, method="linear")


def assign_bins(values, boundaries: np.ndarray) -> np.ndarray:
    """Bin j holds boundary[j-1] < v <= boundary[j]; bin 0 is open below, the last bin open above."""
    return np.searchsorted(boundaries, np.asarray(values, dtype=np.float64), side="left")


@dataclass(frozen=True, eq=False)
class BinIndex:
    attribute: str
    boundaries: np.ndarray
    members: Dict[int, Tuple[str, ...]]
    assignment: Dict[str, int]

    @classmethod
    def build(cls, attribute: str, ids: Sequence[str], values: Sequence[float], n_bins: int) -> "BinIndex":
        boundaries = quantile_bins(values, n_bins)
        bins = assign_bins(values, boundaries)
        members: Dict[int, List[str]] = {}
        for pid, b in zip(ids, bins):
            members.setdefault(int(b), []).append(pid)
        return cls(
            attribute=attribute,
            boundaries=boundaries,
            members={b: tuple(sorted(m)) for b, m in members.items()},
            assignment={pid: int(b) for pid, b in zip(ids, bins)},
        )

    def bin_of(self, poi_id: str) -> int:
        return self.assignment[poi_id]


@dataclass(frozen=True, eq=False)
class AugmentationIndex:
    """Area and report bins plus the precomputed positive pools."""

    area: BinIndex
    report: BinIndex
    pools: Dict[str, Tuple[str, ...]]
    fallback_pools: Dict[str, Tuple[str, ...]] = field(default_factory=dict)

    def pool(self, poi_id: str) -> Tuple[str, ...]:
        try:
            return self.pools[poi_id]
        except KeyError:
            raise DataError(f"unknown target id: {poi_id}") from None

    def augmentable(self, poi_id: str) -> bool:
        return bool(self.pools.get(poi_id) or self.fallback_pools.get(poi_id))

    def summary(self) -> Dict[str, float]:
        sizes = np.array([len(p) for p in self.pools.values()])
        fallback = sum(1 for pid, p in self.pools.items() if not p and self.fallback_pools.get(pid))
        dead = sum(1 for pid in self.pools if not self.augmentable(pid))
        return {
            "mean_pool": float(sizes.mean()) if sizes.size else 0.0,
            "empty_pools": float((sizes == 0).sum()),
            "fallback_pools": float(fallback),
            "unaugmentable": float(dead),
        }


def build_index(pois: Sequence[Poi], n_bins_area: int, n_bins_report: int) -> AugmentationIndex:
    """Pools S^a ∩ S^r minus self for every POI, plus same-area-bin fallback pools."""
    if not pois:
        raise DataError("cannot build an augmentation index over no POIs")
    ids = [p.id for p in pois]
    area = BinIndex.build("area", ids, [p.area for p in pois], n_bins_area)
    report = BinIndex.build("reports", ids, [p.total_reports for p in pois], n_bins_report)

    cells: Dict[Tuple[int, int], List[str]] = {}
    for pid in ids:
        cells.setdefault((area.bin_of(pid), report.bin_of(pid)), []).append(pid)
    cells = {key: sorted(members) for key, members in cells.items()}

    pools: Dict[str, Tuple[str, ...]] = {}
    fallback: Dict[str, Tuple[str, ...]] = {}
    for pid in ids:
        cell = cells[(area.bin_of(pid), report.bin_of(pid))]
        pools[pid] = tuple(m for m in cell if m != pid)
        if not pools[pid]:
            fallback[pid] = tuple(m for m in area.members[area.bin_of(pid)] if m != pid)

    index = AugmentationIndex(area=area, report=report, pools=pools, fallback_pools=fallback)
    logger.info("Built augmentation index", n_pois=len(ids), **index.summary())
    return index


def sample_positives(index: AugmentationIndex, target_id: str, m: int, rng: np.random.Generator) -> List[str]:
    """Draw m positives uniformly from the target's pool (with replacement iff the pool is smaller than m).

    Falls back to the same-area-bin pool when the two-bin intersection is empty;
    raises UnaugmentableError when that is empty too.
    """
    if m < 1:
        raise ConfigError(f"m must be >= 1, got {m}")
    pool = index.pool(target_id)
    if not pool:
        pool = index.fallback_pools.get(target_id, ())
        if not pool:
            raise UnaugmentableError(f"no positives available for {target_id}", detail={"poi_id": target_id})
        logger.debug("Using area-bin fallback pool", poi_id=target_id, pool_size=len(pool))
    replace = len(pool) < m
    picks = rng.choice(len(pool), size=m, replace=replace)
    return [pool[int(i)] for i in picks]
