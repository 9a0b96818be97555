"""
Metrics Schemas for the CSST pipeline
Grid cells, fold summaries and the report written to metrics.json.
"""

import json
from typing import List, Optional

import pandas as pd
from pydantic import BaseModel, Field


class CellMetrics(BaseModel):
    """Test metrics of one (variant, pretrained, fraction, fold) cell."""

    dataset: str
    variant: str
    pretrained: bool
    fraction: float
    fold: int
    mape: float
    acc: float = Field(..., ge=0.0, le=1.0)
    n: int = Field(..., ge=0, description="Instances scored")
    excluded_zero_labels: int = Field(0, ge=0)
    best_epoch: Optional[int] = None
    positives: Optional[int] = Field(None, description="m used for pretraining (sweeps only)")
    prototype_dim: Optional[int] = Field(None, description="d_c used for pretraining (sweeps only)")


class CellSummary(BaseModel):
    """Mean and spread over folds of one grid cell."""

    variant: str
    pretrained: bool
    fraction: float
    positives: Optional[int] = None
    prototype_dim: Optional[int] = None
    n_folds: int
    mape_mean: float
    mape_std: float
    acc_mean: float
    acc_std: float


class AccGain(BaseModel):
    """ACC of the pretrained model over its scratch counterpart."""

    variant: str
    fraction: float
    scratch_acc: float
    pretrained_acc: float
    absolute_gain: float
    relative_gain: Optional[float] = Field(None, description="absolute_gain / scratch_acc; None when scratch_acc is 0")


class MetricsReport(BaseModel):
    dataset: str
    config_hash: str
    seed: int
    epsilon: float
    kind: str = Field("ablation", description="ablation | sweep | evaluation")
    split: Optional[str] = None
    cells: List[CellMetrics] = Field(default_factory=list)
    summary: List[CellSummary] = Field(default_factory=list)
    gains: List[AccGain] = Field(default_factory=list)

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, indent=2) + "\n"

    def cells_frame(self) -> pd.DataFrame:
        return pd.DataFrame([c.model_dump(mode="json") for c in self.cells])

    def summary_frame(self) -> pd.DataFrame:
        return pd.DataFrame([s.model_dump(mode="json") for s in self.summary])
