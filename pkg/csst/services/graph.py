"""
Attributed k-NN graph over POIs and per-target subgraph instances.
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from csst.core.errors import ConfigError, DataError
from csst.schemas.dataset import FeatureTable, Poi
from csst.utils.logger import get_logger

logger = get_logger(__name__)

EARTH_RADIUS_M = 6_371_008.8
_ROW_BLOCK = 512


def haversine_m(lon1, lat1, lon2, lat2):
    """Great-circle distance in meters; broadcasts over numpy arrays."""
    lon1, lat1, lon2, lat2 = (np.radians(np.asarray(v, dtype=np.float64)) for v in (lon1, lat1, lon2, lat2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def edge_weight(d_ij, sigma: float):
    """w = exp(-d^2 / sigma^2), in (0, 1]."""
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    d = np.asarray(d_ij, dtype=np.float64)
    if np.any(d < 0):
        raise DataError("edge distance must be non-negative")
    w = np.exp(-(d ** 2) / sigma ** 2)
    return float(w) if w.ndim == 0 else w


@dataclass(frozen=True, eq=False)
class AttributedGraph:
    """Directed k-NN adjacency: node i -> its nearest POIs within the cutoff."""

    ids: Tuple[str, ...]
    neighbors: Tuple[Tuple[str, ...], ...]
    distances: Tuple[Tuple[float, ...], ...]
    k: int
    cutoff_m: float

    def __post_init__(self):
        object.__setattr__(self, "_index", {pid: i for i, pid in enumerate(self.ids)})

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, poi_id: str) -> bool:
        return poi_id in self._index

    def neighbor_list(self, poi_id: str) -> List[Tuple[str, float]]:
        """(neighbor id, meters) sorted by distance then id."""
        try:
            i = self._index[poi_id]
        except KeyError:
            raise DataError(f"unknown target id: {poi_id}") from None
        return list(zip(self.neighbors[i], self.distances[i]))

    def degree_summary(self) -> Dict[str, float]:
        degrees = np.array([len(n) for n in self.neighbors])
        return {
            "nodes": float(len(degrees)),
            "mean_degree": float(degrees.mean()) if len(degrees) else 0.0,
            "isolated": float((degrees == 0).sum()),
        }


def build_graph(pois: Sequence[Poi], k: int, cutoff_m: float) -> AttributedGraph:
    """Link each POI to its <= k nearest POIs by great-circle distance, dropping edges beyond the cutoff.

    Ties are broken by ascending POI id, so the result does not depend on input order.
    """
    if k < 0:
        raise ConfigError(f"k must be >= 0, got {k}")
    if cutoff_m <= 0:
        raise ConfigError(f"cutoff must be positive, got {cutoff_m}")
    ids = [p.id for p in pois]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate POI ids in graph input")

    order = sorted(range(len(pois)), key=lambda i: ids[i])
    ids_sorted = [ids[i] for i in order]
    lon = np.array([pois[i].lon for i in order])
    lat = np.array([pois[i].lat for i in order])
    n = len(ids_sorted)

    neighbors: Dict[str, Tuple[str, ...]] = {}
    distances: Dict[str, Tuple[float, ...]] = {}
    for start in range(0, n, _ROW_BLOCK):
        stop = min(start + _ROW_BLOCK, n)
        block = haversine_m(lon[start:stop, None], lat[start:stop, None], lon[None, :], lat[None, :])
        for r in range(stop - start):
            i = start + r
            row = block[r]
            candidates = np.flatnonzero(row <= cutoff_m)
            candidates = candidates[candidates != i]
            if k == 0 or candidates.size == 0:
                neighbors[ids_sorted[i]], distances[ids_sorted[i]] = (), ()
                continue
            # positions are in id order, so a stable sort on distance breaks ties by id
            chosen = candidates[np.argsort(row[candidates], kind="stable")][:k]
            neighbors[ids_sorted[i]] = tuple(ids_sorted[j] for j in chosen)
            distances[ids_sorted[i]] = tuple(float(row[j]) for j in chosen)

    graph = AttributedGraph(
        ids=tuple(ids),
        neighbors=tuple(neighbors[pid] for pid in ids),
        distances=tuple(distances[pid] for pid in ids),
        k=k,
        cutoff_m=cutoff_m,
    )
    logger.info("Built attributed graph", k=k, cutoff_m=cutoff_m, **graph.degree_summary())
    return graph


@dataclass(frozen=True, eq=False)
class Instance:
    """Hop-limited subgraph around a target.

    `node_ids[0]` is the target. Edge e carries a message into `edge_dst[e]`
    from `edge_src[e]` (local node indices) over `edge_dist[e]` meters.
    """

    target_id: str
    node_ids: Tuple[str, ...]
    edge_dst: np.ndarray
    edge_src: np.ndarray
    edge_dist: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def neighbor_ids(self) -> Tuple[str, ...]:
        return self.node_ids[1:]

    def target_edges(self) -> List[Tuple[str, float]]:
        mask = self.edge_dst == 0
        return [(self.node_ids[s], float(d)) for s, d in zip(self.edge_src[mask], self.edge_dist[mask])]


def khop_subgraph(graph: AttributedGraph, target_id: str, hops: int, max_neighbors: int) -> Instance:
    """Breadth-first expansion up to `hops`; each hop admits at most `max_neighbors` new nodes, nearest first."""
    if target_id not in graph:
        raise DataError(f"unknown target id: {target_id}")
    if hops < 0:
        raise ConfigError(f"hops must be >= 0, got {hops}")

    node_ids = [target_id]
    local = {target_id: 0}
    frontier = [target_id]
    expanded: List[str] = []
    for _ in range(hops):
        best: Dict[str, Tuple[float, str]] = {}
        for node in frontier:
            for nbr, dist in graph.neighbor_list(node)[:max_neighbors]:
                if nbr in local:
                    continue
                key = (dist, nbr)
                if nbr not in best or key < best[nbr]:
                    best[nbr] = key
        admitted = sorted(best.values())[:max_neighbors]
        expanded.extend(frontier)
        frontier = []
        for _, nbr in admitted:
            local[nbr] = len(node_ids)
            node_ids.append(nbr)
            frontier.append(nbr)

    dst, src, dist = [], [], []
    for node in expanded:
        for nbr, d in graph.neighbor_list(node)[:max_neighbors]:
            if nbr in local:
                dst.append(local[node])
                src.append(local[nbr])
                dist.append(d)
    return Instance(
        target_id=target_id,
        node_ids=tuple(node_ids),
        edge_dst=np.array(dst, dtype=np.int64),
        edge_src=np.array(src, dtype=np.int64),
        edge_dist=np.array(dist, dtype=np.float64),
    )


def build_instances(graph: AttributedGraph, hops: int, max_neighbors: int) -> Dict[str, Instance]:
    """Instance of every POI in the graph (pure; graph is immutable)."""
    return {pid: khop_subgraph(graph, pid, hops, max_neighbors) for pid in graph.ids}


@dataclass(frozen=True, eq=False)
class PackedInstance:
    """One instance in batch layout: feature rows (target first) and local edges sorted by receiver."""

    target_id: str
    node_rows: np.ndarray
    edge_dst: np.ndarray
    edge_src: np.ndarray
    edge_dist: np.ndarray


def pack_instance(inst: Instance, features: FeatureTable, rounds: Optional[int] = None) -> PackedInstance:
    """Lay out one instance for Batch; with `rounds` set, edges outside the receptive field are dropped."""
    ordered = [inst.node_ids[0]] + sorted(inst.node_ids[1:])
    position = {pid: j for j, pid in enumerate(ordered)}
    edges = [
        (inst.node_ids[d], inst.node_ids[s], float(w))
        for d, s, w in zip(inst.edge_dst, inst.edge_src, inst.edge_dist)
    ]
    receivers = {e[0] for e in edges}
    edges.extend((pid, pid, 0.0) for pid in ordered if pid not in receivers)
    if rounds is not None:
        edges = _receptive_edges(edges, inst.node_ids[0], rounds)
    edges.sort(key=lambda e: (position[e[0]], e[1], e[2]))
    return PackedInstance(
        target_id=inst.target_id,
        node_rows=features.rows(ordered),
        edge_dst=np.array([position[d] for d, _, _ in edges], dtype=np.int64),
        edge_src=np.array([position[s] for _, s, _ in edges], dtype=np.int64),
        edge_dist=np.array([w for _, _, w in edges], dtype=np.float64),
    )


def _stack(parts: Sequence[np.ndarray], dtype) -> np.ndarray:
    return np.concatenate([np.empty(0, dtype=dtype), *parts])


@dataclass(frozen=True, eq=False)
class Batch:
    """Many instances packed into one block for a single forward pass.

    Node rows are ordered per instance as target first, then remaining ids
    ascending; edges are ordered by (receiver id, sender id). Nodes with no
    incoming edge get a zero-distance self edge.
    """

    target_ids: Tuple[str, ...]
    node_va: np.ndarray
    node_vc: np.ndarray
    edge_dst: np.ndarray
    edge_src: np.ndarray
    edge_dist: np.ndarray
    target_rows: np.ndarray
    reports: np.ndarray

    @property
    def size(self) -> int:
        return len(self.target_ids)

    @property
    def n_nodes(self) -> int:
        return self.node_va.shape[0]

    @property
    def target_va(self) -> np.ndarray:
        return self.node_va[self.target_rows]

    @property
    def target_vc(self) -> np.ndarray:
        return self.node_vc[self.target_rows]

    @classmethod
    def from_instances(cls, instances: Sequence[Instance], features: FeatureTable,
                       rounds: Optional[int] = None) -> "Batch":
        """Pack `instances`; with `rounds` set, edges outside the target's receptive field are dropped."""
        return cls.from_packed([pack_instance(inst, features, rounds) for inst in instances], features)

    @classmethod
    def from_packed(cls, packs: Sequence[PackedInstance], features: FeatureTable) -> "Batch":
        """Concatenate packed instances, shifting local node indices by each block's offset."""
        sizes = np.array([p.node_rows.size for p in packs], dtype=np.int64)
        offsets = np.cumsum(sizes) - sizes
        shift = np.repeat(offsets, np.array([p.edge_dst.size for p in packs], dtype=np.int64))
        rows = _stack([p.node_rows for p in packs], np.int64)
        return cls(
            target_ids=tuple(p.target_id for p in packs),
            node_va=features.v_a[rows],
            node_vc=features.v_c[rows],
            edge_dst=_stack([p.edge_dst for p in packs], np.int64) + shift,
            edge_src=_stack([p.edge_src for p in packs], np.int64) + shift,
            edge_dist=_stack([p.edge_dist for p in packs], np.float64),
            target_rows=offsets,
            reports=features.reports[rows[offsets]],
        )


def _receptive_edges(edges: List[Tuple[str, str, float]], target_id: str,
                     rounds: int) -> List[Tuple[str, str, float]]:
    """Edges whose receiver influences the target within `rounds` message-passing rounds."""
    needed = {target_id}
    for _ in range(max(rounds - 1, 0)):
        needed |= {src for dst, src, _ in edges if dst in needed}
    return [e for e in edges if e[0] in needed]


def instance_size_bound(hops: int, max_neighbors: int) -> int:
    return 1 + max_neighbors * hops

