"""
k-NN graph construction, edge weights, hop-limited instances and batch packing.
"""

import math

import numpy as np
import pytest

from csst.core.errors import ConfigError, DataError
from csst.schemas.dataset import FeatureTable, Poi
from csst.services.graph import (EARTH_RADIUS_M, Batch, build_graph, build_instances, edge_weight,
                                 haversine_m, instance_size_bound, khop_subgraph)

METERS_PER_DEGREE = EARTH_RADIUS_M * math.pi / 180.0


def poi(pid, north_m=0.0, east_m=0.0):
    return Poi(
        id=pid,
        lon=east_m / METERS_PER_DEGREE,
        lat=north_m / METERS_PER_DEGREE,
        v_a=np.array([100.0, 1.0]),
        v_c=np.array([0.25, 0.25, 0.25, 0.25, 0.5, 0.5]),
        reports=np.array([1.0, 2.0]),
    )


def features_for(pois):
    n = len(pois)
    return FeatureTable(
        ids=tuple(p.id for p in pois),
        v_a=np.arange(2 * n, dtype=float).reshape(n, 2),
        v_c=np.zeros((n, 6)),
        reports=np.ones((n, 2)),
    )


def test_close_pair_are_mutual_neighbors():
    graph = build_graph([poi("a"), poi("b", north_m=100)], k=1, cutoff_m=500)
    assert [n for n, _ in graph.neighbor_list("a")] == ["b"]
    assert [n for n, _ in graph.neighbor_list("b")] == ["a"]
    assert graph.neighbor_list("a")[0][1] == pytest.approx(100.0, rel=1e-9)


def test_cutoff_isolates_distant_pair():
    graph = build_graph([poi("a"), poi("b", north_m=600)], k=1, cutoff_m=500)
    assert graph.neighbor_list("a") == []
    assert graph.neighbor_list("b") == []
    assert graph.degree_summary()["isolated"] == 2.0


def test_collinear_middle_node_links_its_adjacent_pois():
    pois = [poi(f"p{i}", north_m=200.0 * i) for i in range(5)]
    graph = build_graph(pois, k=2, cutoff_m=1000)
    assert {n for n, _ in graph.neighbor_list("p2")} == {"p1", "p3"}
    assert [n for n, _ in graph.neighbor_list("p0")] == ["p1", "p2"]


def test_equal_distances_break_ties_by_id():
    pois = [poi("c", north_m=50), poi("center"), poi("b", north_m=-50), poi("a", east_m=50)]
    graph = build_graph(pois, k=2, cutoff_m=500)
    assert [n for n, _ in graph.neighbor_list("center")] == ["a", "b"]


def test_graph_bounds(small_dataset):
    graph = build_graph(small_dataset.pois, k=8, cutoff_m=500)
    by_pair = {}
    for pid in graph.ids:
        links = graph.neighbor_list(pid)
        assert len(links) <= 8
        assert all(d <= 500 for _, d in links)
        by_pair.update({(pid, n): d for n, d in links})
    for (i, j), d in by_pair.items():
        if (j, i) in by_pair:
            assert by_pair[(j, i)] == pytest.approx(d, rel=1e-12)


def test_duplicate_ids_rejected():
    with pytest.raises(DataError):
        build_graph([poi("a"), poi("a", north_m=10)], k=1, cutoff_m=500)


def test_invalid_graph_settings():
    with pytest.raises(ConfigError):
        build_graph([poi("a")], k=-1, cutoff_m=500)
    with pytest.raises(ConfigError):
        build_graph([poi("a")], k=1, cutoff_m=0)


def test_haversine_symmetric_and_zero_on_identity():
    assert haversine_m(116.4, 39.9, 116.4, 39.9) == 0.0
    forward = haversine_m(116.4, 39.9, 116.41, 39.91)
    assert forward == pytest.approx(haversine_m(116.41, 39.91, 116.4, 39.9), rel=1e-15)
    assert forward > 0


def test_edge_weight_examples():
    assert edge_weight(0.0, 500.0) == 1.0
    assert edge_weight(500.0, 500.0) == pytest.approx(math.exp(-1.0), abs=1e-6)
    assert edge_weight(100.0, 500.0) > edge_weight(200.0, 500.0)
    with pytest.raises(ConfigError):
        edge_weight(10.0, 0.0)
    with pytest.raises(DataError):
        edge_weight(-1.0, 10.0)


def test_hops_zero_keeps_target_only():
    graph = build_graph([poi("a"), poi("b", north_m=10)], k=1, cutoff_m=500)
    instance = khop_subgraph(graph, "a", hops=0, max_neighbors=20)
    assert instance.node_ids == ("a",)
    assert instance.edge_dst.size == 0


def test_one_hop_with_three_neighbors():
    pois = [poi("t"), poi("n1", north_m=50), poi("n2", east_m=80), poi("n3", north_m=-120)]
    graph = build_graph(pois, k=20, cutoff_m=500)
    instance = khop_subgraph(graph, "t", hops=1, max_neighbors=20)
    assert instance.n_nodes == 4
    assert instance.node_ids[0] == "t"
    assert sorted(s for s, _ in instance.target_edges()) == ["n1", "n2", "n3"]


def test_one_hop_truncates_to_nearest():
    ring = [poi(f"n{i:02d}", north_m=(10.0 + 7.0 * i) * math.cos(i), east_m=(10.0 + 7.0 * i) * math.sin(i))
            for i in range(25)]
    graph = build_graph([poi("t")] + ring, k=25, cutoff_m=1000)
    instance = khop_subgraph(graph, "t", hops=1, max_neighbors=20)
    assert instance.n_nodes == 21
    nearest = [n for n, _ in graph.neighbor_list("t")][:20]
    assert set(instance.neighbor_ids) == set(nearest)
    assert instance.n_nodes <= instance_size_bound(1, 20)


def test_unknown_target():
    graph = build_graph([poi("a")], k=1, cutoff_m=500)
    with pytest.raises(DataError):
        khop_subgraph(graph, "zzz", hops=1, max_neighbors=2)


def test_instances_independent_of_input_order(small_dataset):
    pois = list(small_dataset.pois)
    shuffled = [pois[i] for i in np.random.default_rng(4).permutation(len(pois))]
    first = build_instances(build_graph(pois, 8, 500), hops=2, max_neighbors=4)
    second = build_instances(build_graph(shuffled, 8, 500), hops=2, max_neighbors=4)
    for pid, inst in first.items():
        other = second[pid]
        assert inst.node_ids == other.node_ids
        assert np.array_equal(inst.edge_dst, other.edge_dst)
        assert np.array_equal(inst.edge_src, other.edge_src)
        assert np.array_equal(inst.edge_dist, other.edge_dist)


def test_batch_adds_self_edges_and_sorts():
    pois = [poi("t"), poi("b", north_m=50), poi("a", east_m=60)]
    graph = build_graph(pois, k=2, cutoff_m=500)
    instance = khop_subgraph(graph, "t", hops=1, max_neighbors=2)
    batch = Batch.from_instances([instance], features_for(pois))
    # nodes: target, then a, b
    assert batch.target_rows.tolist() == [0]
    assert batch.node_va[:, 0].tolist() == [0.0, 4.0, 2.0]
    edges = list(zip(batch.edge_dst.tolist(), batch.edge_src.tolist(), batch.edge_dist.tolist()))
    assert [(d, s) for d, s, _ in edges] == [(0, 1), (0, 2), (1, 1), (2, 2)]
    assert edges[2][2] == 0.0 and edges[3][2] == 0.0


def test_batch_receptive_field_pruning():
    pois = [poi("t"), poi("b", north_m=50), poi("a", east_m=60)]
    graph = build_graph(pois, k=2, cutoff_m=500)
    instance = khop_subgraph(graph, "t", hops=1, max_neighbors=2)
    batch = Batch.from_instances([instance], features_for(pois), rounds=1)
    assert set(batch.edge_dst.tolist()) == {0}


def test_batch_offsets_multiple_instances():
    pois = [poi("t"), poi("b", north_m=50), poi("a", east_m=60)]
    graph = build_graph(pois, k=2, cutoff_m=500)
    instances = build_instances(graph, hops=1, max_neighbors=2)
    batch = Batch.from_instances([instances["t"], instances["a"]], features_for(pois))
    assert batch.size == 2
    assert batch.target_rows.tolist() == [0, 3]
    assert batch.reports.shape == (2, 2)
    assert batch.edge_dst.max() < batch.n_nodes


def test_empty_batch():
    pois = [poi("t"), poi("a", east_m=60)]
    batch = Batch.from_instances([], features_for(pois))
    assert batch.size == 0
    assert batch.n_nodes == 0
    assert batch.edge_dst.dtype == np.int64


def test_context_batches_reuse_packed_instances(stgnn_context):
    ids = stgnn_context.dataset.ids[40:60]
    expected = Batch.from_instances([stgnn_context.instances[i] for i in ids], stgnn_context.features,
                                    rounds=stgnn_context.backbone.conv_layers)
    first = stgnn_context.batch(ids)
    packs = [stgnn_context._packs[i] for i in ids]
    second = stgnn_context.batch(list(reversed(ids)))

    assert [stgnn_context._packs[i] for i in ids] == packs
    for name in ("node_va", "node_vc", "edge_dst", "edge_src", "edge_dist", "target_rows", "reports"):
        assert np.array_equal(getattr(first, name), getattr(expected, name)), name
    assert second.target_ids == tuple(reversed(ids))
    assert np.array_equal(second.reports, expected.reports[::-1])
