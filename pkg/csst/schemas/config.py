"""
Configuration Schemas for the CSST pipeline
One pydantic model per pipeline stage, aggregated by RunConfig.
"""

import hashlib
import json
from enum import Enum
from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class StrictModel(BaseModel):
    """Base model rejecting unknown keys."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class BackboneVariant(str, Enum):
    """Backbone networks."""
    MLP = "mlp"
    MSFNET = "msfnet"
    STGNN = "stgnn"


class OptimizerName(str, Enum):
    """Optimizer families."""
    SGD = "sgd"
    MOMENTUM = "momentum"
    ADAM = "adam"


class OptimizerConfig(StrictModel):
    """Update rule settings shared by pretraining and fine-tuning."""

    name: OptimizerName = Field(OptimizerName.SGD, description="Optimizer family")
    learning_rate: float = Field(..., gt=0.0, description="Base learning rate alpha")
    weight_decay: float = Field(1e-4, ge=0.0, description="L2 term added to the gradient")
    lr_divisor: float = Field(1.0, ge=1.0, description="eta, applied to backbone groups only")
    momentum: float = Field(0.9, ge=0.0, lt=1.0, description="Heavy-ball coefficient (momentum only)")
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)


class GraphConfig(StrictModel):
    """k-NN adjacency construction."""

    k: int = Field(20, ge=0, description="Neighbors kept per POI")
    cutoff_m: float = Field(500.0, gt=0.0, description="Edges longer than this are dropped")


class AugmentConfig(StrictModel):
    """Quantile-bin positive sampling."""

    n_bins_area: int = Field(10, ge=1)
    n_bins_report: int = Field(10, ge=1)
    m: int = Field(20, ge=1, description="Positives per anchor")
    resample_each_epoch: bool = Field(True, description="Draw fresh positives every pass over the data")


class BackboneConfig(StrictModel):
    """Encoder architecture."""

    variant: BackboneVariant = Field(BackboneVariant.STGNN)
    hidden_dim: int = Field(64, ge=32, le=1024, description="d")
    mlp_depth: int = Field(2, ge=1, le=4, description="L_m")
    conv_layers: int = Field(1, ge=1, description="L_c")
    sigma_m: float = Field(500.0, gt=0.0, description="Edge weight attenuation sigma")
    hops: int = Field(1, ge=0)
    max_neighbors: int = Field(20, ge=0)


class PretrainConfig(StrictModel):
    """Contrastive pretraining."""

    n_prototypes: int = Field(64, ge=2, description="K")
    prototype_dim: int = Field(512, gt=0, description="d_c")
    projection_layers: int = Field(1, ge=1, description="Depth of the prototypes network")
    temperature: float = Field(0.05, gt=0.0, description="tau")
    batch_size: int = Field(256, ge=1)
    max_steps: int = Field(200, ge=1)
    sinkhorn_iterations: int = Field(3, ge=0)
    learning_rate: float = Field(0.05, gt=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    optimizer: OptimizerName = Field(OptimizerName.SGD)
    early_stop_window: Optional[int] = Field(None, ge=2, description="Moving-average window for the plateau stop")
    early_stop_tolerance: float = Field(1e-4, ge=0.0)

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(name=self.optimizer, learning_rate=self.learning_rate,
                               weight_decay=self.weight_decay)


class FineTuneConfig(StrictModel):
    """Supervised fine-tuning on labeled POIs."""

    learning_rate: float = Field(5e-3, gt=0.0, description="alpha")
    lr_divisor: float = Field(10.0, ge=1.0, description="eta")
    batch_size: int = Field(64, ge=1)
    max_epochs: int = Field(60, ge=1)
    weight_decay: float = Field(1e-4, ge=0.0)
    optimizer: OptimizerName = Field(OptimizerName.SGD)
    scale_factor: float = Field(1.2, gt=1.0, description="Target scale = factor * max(train labels)")

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(name=self.optimizer, learning_rate=self.learning_rate,
                               weight_decay=self.weight_decay, lr_divisor=self.lr_divisor)


class EvalConfig(StrictModel):
    """Cross-validation grid and metrics."""

    epsilon: float = Field(0.3, gt=0.0, description="ACC threshold")
    label_fractions: List[float] = Field(default_factory=lambda: [0.1, 0.2, 0.5, 0.7])
    valid_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    n_folds: int = Field(10, ge=1)
    variants: List[BackboneVariant] = Field(
        default_factory=lambda: [BackboneVariant.MLP, BackboneVariant.MSFNET, BackboneVariant.STGNN]
    )
    pretrain_flags: List[bool] = Field(default_factory=lambda: [False, True])
    sweep_positives: List[int] = Field(default_factory=lambda: [5, 10, 20])
    sweep_prototype_dims: List[int] = Field(default_factory=lambda: [64, 256, 512])
    sweep_fraction: float = Field(0.1, gt=0.0, lt=1.0)
    sweep_folds: int = Field(3, ge=1, description="Folds evaluated per sweep cell")

    @field_validator("label_fractions")
    @classmethod
    def _fractions_in_range(cls, values: List[float]) -> List[float]:
        if not values or any(not 0.0 < v < 1.0 for v in values):
            raise ValueError("label fractions must lie in (0, 1)")
        return sorted(values)


class SynthConfig(StrictModel):
    """Synthetic city generator."""

    n_pois: int = Field(5500, ge=10)
    n_labeled: Optional[int] = Field(500, ge=1, description="POIs keeping their label; None keeps all")
    extent_km: float = Field(12.0, gt=0.0)
    center_lon: float = Field(116.40, ge=-180.0, le=180.0)
    center_lat: float = Field(39.90, ge=-90.0, le=90.0)
    n_intervals: int = Field(4, ge=1, description="D_r, weekly intervals in the window")
    n_location_features: int = Field(2, ge=0)
    n_traffic_levels: int = Field(4, ge=1)
    age_bands: int = Field(4, ge=2)
    young_adult_band: int = Field(1, ge=0)
    k: int = Field(20, ge=0)
    cutoff_m: float = Field(500.0, gt=0.0)
    sigma_m: float = Field(500.0, gt=0.0)
    log_area_mean: float = Field(7.0)
    log_area_std: float = Field(0.8, gt=0.0)
    intercept: float = Field(0.5)
    area_weight: float = Field(0.8, ge=0.0, description="Flow never falls as area grows")
    portrait_weight: float = Field(2.0)
    traffic_weight: float = Field(0.3)
    neighbor_weight: float = Field(0.05)
    noise_scale: float = Field(0.15, ge=0.0)
    flow_scale: float = Field(100.0, gt=0.0)
    report_beta_a: float = Field(1.2, gt=0.0)
    report_beta_b: float = Field(18.0, gt=0.0)
    report_tail_share: float = Field(0.1, ge=0.0, le=1.0, description="Share of POIs with inflated ratios")
    report_tail_scale: float = Field(4.0, ge=1.0)
    seasonal_amplitude: float = Field(0.2, ge=0.0, lt=1.0)
    seed: int = Field(7)

    @model_validator(mode="after")
    def _check_bands(self) -> "SynthConfig":
        if self.young_adult_band >= self.age_bands:
            raise ValueError("young_adult_band must index an age band")
        if self.n_labeled is not None and self.n_labeled > self.n_pois:
            raise ValueError("n_labeled exceeds n_pois")
        return self


class DataConfig(StrictModel):
    """Dataset source: CSV files, or the generator when no path is set."""

    directory: Optional[str] = Field(None, description="Directory holding pois.csv/reports.csv/labels.csv")
    pois_path: Optional[str] = None
    reports_path: Optional[str] = None
    labels_path: Optional[str] = None
    portrait_groups: List[int] = Field(default_factory=lambda: [4, 2], description="Age bands, gender groups")

    def resolved_paths(self) -> Optional[Dict[str, str]]:
        if self.directory:
            return {
                "pois": self.pois_path or f"{self.directory}/pois.csv",
                "reports": self.reports_path or f"{self.directory}/reports.csv",
                "labels": self.labels_path or f"{self.directory}/labels.csv",
            }
        if self.pois_path and self.reports_path:
            return {"pois": self.pois_path, "reports": self.reports_path, "labels": self.labels_path or ""}
        return None


class RunConfig(StrictModel):
    """Everything a run needs; written back resolved beside the outputs."""

    seed: int = Field(0)
    dataset_name: str = Field("synthetic")
    output_dir: Optional[str] = Field(None, description="Defaults to CSST_OUTPUT_ROOT/<timestamp>")
    data: DataConfig = Field(default_factory=DataConfig)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    graph: GraphConfig = Field(default_factory=GraphConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    finetune: FineTuneConfig = Field(default_factory=FineTuneConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)
    train_fraction: float = Field(0.7, gt=0.0, lt=1.0, description="Fraction used by single-split finetune")
    fold_index: int = Field(0, ge=0)
    overrides: List[str] = Field(default_factory=list)
    source_file: Optional[str] = None

    def canonical_json(self) -> str:
        payload = self.model_dump(mode="json", exclude={"output_dir", "overrides", "source_file"})
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()

    def short_hash(self) -> str:
        return self.config_hash()[:12]


def model_hash(section: BaseModel) -> str:
    """Hash of a single config section (used to match checkpoints to backbones)."""
    payload: Dict[str, Any] = section.model_dump(mode="json")
    return hashlib.sha256(json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()).hexdigest()[:12]
