"""
Prepared inputs shared by pretraining, fine-tuning and evaluation.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

from csst.core.errors import CheckpointError
from csst.schemas.config import BackboneConfig, GraphConfig
from csst.schemas.dataset import Dataset, FeatureTable
from csst.services.data_io import FeatureScaler
from csst.services.graph import (AttributedGraph, Batch, Instance, PackedInstance, build_graph, build_instances,
                                 pack_instance)
from csst.utils.logger import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True, eq=False)
class PipelineContext:
    """Dataset plus its scaled features, graph and per-target instances."""

    dataset: Dataset
    scaler: FeatureScaler
    features: FeatureTable
    graph: AttributedGraph
    instances: Dict[str, Instance]
    backbone: BackboneConfig
    _packs: Dict[str, PackedInstance] = field(default_factory=dict, init=False, repr=False)

    @classmethod
    def build(cls, dataset: Dataset, graph_cfg: GraphConfig, backbone: BackboneConfig,
              scaler: Optional[FeatureScaler] = None) -> "PipelineContext":
        """Prepare inputs; pass the `scaler` stored with a checkpoint to reuse its statistics."""
        with logger.performance_context("prepare_inputs", n_pois=len(dataset),
                                        restored_scaler=scaler is not None):
            if scaler is None:
                scaler = FeatureScaler.fit(dataset)
            elif dataset.pois and len(scaler.va_mean) != len(dataset.pois[0].v_a):
                raise CheckpointError("stored feature scaler does not match the attribute width",
                                      detail={"scaler": len(scaler.va_mean), "data": len(dataset.pois[0].v_a)})
            features = scaler.transform(dataset)
            graph = build_graph(dataset.pois, graph_cfg.k, graph_cfg.cutoff_m)
            instances = build_instances(graph, backbone.hops, backbone.max_neighbors)
        return cls(dataset=dataset, scaler=scaler, features=features, graph=graph,
                   instances=instances, backbone=backbone)

    def with_backbone(self, backbone: BackboneConfig) -> "PipelineContext":
        """Same inputs for another variant; instances are rebuilt only when the hop settings change."""
        instances = self.instances
        if (backbone.hops, backbone.max_neighbors) != (self.backbone.hops, self.backbone.max_neighbors):
            instances = build_instances(self.graph, backbone.hops, backbone.max_neighbors)
        return PipelineContext(dataset=self.dataset, scaler=self.scaler, features=self.features,
                               graph=self.graph, instances=instances, backbone=backbone)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return self.features.dims

    def batch(self, ids: Sequence[str]) -> Batch:
        """Batch for `ids`; each instance is packed once per context and reused."""
        packs = []
        for pid in ids:
            pack = self._packs.get(pid)
            if pack is None:
                pack = pack_instance(self.instances[pid], self.features, rounds=self.backbone.conv_layers)
                self._packs[pid] = pack
            packs.append(pack)
        return Batch.from_packed(packs, self.features)
