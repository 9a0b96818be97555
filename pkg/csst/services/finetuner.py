"""
Supervised fine-tuning service
Backbone (pretrained or fresh) plus regression head trained with soft binary
cross-entropy on scaled flows; backbone groups step at alpha / eta.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from tqdm import tqdm

from csst.core.config.settings import settings
from csst.core.errors import CheckpointError, DataError, ShapeError
from csst.models.encoders import (BACKBONE_PREFIXES, backbone_forward, check_backbone,
                                  head_logits, init_backbone, init_head, predict_normalized)
from csst.numerics import autodiff as ad
from csst.numerics.autodiff import Tape
from csst.numerics.checkpoint import Checkpoint
from csst.numerics.optimizer import Optimizer
from csst.numerics.params import ParamStore, derive_rng
from csst.schemas.config import BackboneConfig, FineTuneConfig, model_hash
from csst.services.context import PipelineContext
from csst.services.metrics import mape
from csst.utils.logger import get_logger, log_function_calls

logger = get_logger(__name__)

CLAMP_LOW = 1e-6
CLAMP_HIGH = 1.0 - 1e-6
PREDICT_CHUNK = 512


@dataclass(frozen=True)
class TargetScaler:
    """y -> y / scale clamped into the sigmoid's open range; inverse multiplies back."""

    scale: float

    def forward(self, y) -> np.ndarray:
        return np.clip(np.asarray(y, dtype=np.float64) / self.scale, CLAMP_LOW, CLAMP_HIGH)

    def inverse(self, y_norm) -> np.ndarray:
        return np.asarray(y_norm, dtype=np.float64) * self.scale


def normalize_targets(train_labels: Sequence[float], factor: float = 1.2) -> TargetScaler:
    labels = np.asarray(train_labels, dtype=np.float64)
    if labels.size == 0 or not np.any(labels > 0):
        raise DataError("target scaler needs at least one positive training label")
    return TargetScaler(scale=float(factor * labels.max()))


@dataclass
class FineTuneResult:
    """Best-validation parameters (backbone + head) and the training trace."""

    params: ParamStore
    scaler: TargetScaler
    backbone: BackboneConfig
    best_epoch: int
    best_valid_mape: float
    history: List[Dict[str, float]] = field(default_factory=list)
    pretrained: bool = False

    def checkpoint(self, config_hash: str, context: PipelineContext) -> Checkpoint:
        return Checkpoint(
            params=self.params,
            meta={
                "stage": "finetune",
                "config_hash": config_hash,
                "backbone": self.backbone.model_dump(mode="json"),
                "backbone_hash": model_hash(self.backbone),
                "dims": list(context.dims),
                "target_scale": self.scaler.scale,
                "best_epoch": self.best_epoch,
                "best_valid_mape": self.best_valid_mape,
                "pretrained": self.pretrained,
                "feature_scaler": context.scaler.to_dict(),
            },
        )


def scaler_from_checkpoint(checkpoint: Checkpoint) -> TargetScaler:
    if "target_scale" not in checkpoint.meta:
        raise CheckpointError("checkpoint carries no target scale; is it a fine-tuned model?")
    return TargetScaler(scale=float(checkpoint.meta["target_scale"]))


def predict(params: ParamStore, context: PipelineContext, ids: Sequence[str],
            scaler: TargetScaler) -> np.ndarray:
    """Original-scale flow estimates for `ids`."""
    out = []
    for start in range(0, len(ids), PREDICT_CHUNK):
        chunk = list(ids[start:start + PREDICT_CHUNK])
        out.append(predict_normalized(context.batch(chunk), params, context.backbone))
    return scaler.inverse(np.concatenate(out) if out else np.empty(0))


class FineTuner:
    """Fits backbone + head on one train/valid split."""

    def __init__(self, context: PipelineContext, cfg: FineTuneConfig, seed: int):
        self.context = context
        self.cfg = cfg
        self.seed = seed

    def initial_params(self, pretrained: Optional[ParamStore] = None) -> ParamStore:
        backbone_cfg = self.context.backbone
        if pretrained is not None:
            backbone = pretrained.select(BACKBONE_PREFIXES)
            try:
                check_backbone(backbone, backbone_cfg, self.context.dims)
            except ShapeError as exc:
                raise CheckpointError(f"pretrained backbone incompatible: {exc.message}", detail=exc.detail) from exc
        else:
            backbone = init_backbone(backbone_cfg, self.context.dims, derive_rng(self.seed, "backbone"))
        head = init_head(backbone_cfg.hidden_dim, derive_rng(self.seed, "head"))
        return backbone.merged(head)

    def group_divisors(self) -> Dict[str, float]:
        return {prefix: self.cfg.lr_divisor for prefix in BACKBONE_PREFIXES}

    def batch_loss(self, params: ParamStore, ids: Sequence[str], targets: np.ndarray):
        tape = Tape()
        leaves = tape.watch(params)
        o_t = backbone_forward(tape, self.context.batch(ids), leaves, self.context.backbone)
        loss = ad.mean(ad.bce_with_logits(head_logits(o_t, leaves), targets.reshape(-1, 1)))
        return tape, leaves, loss

    @log_function_calls
    def fit(self, train_ids: Sequence[str], valid_ids: Sequence[str],
            pretrained: Optional[ParamStore] = None) -> FineTuneResult:
        if not train_ids or not valid_ids:
            raise DataError("fine-tuning needs non-empty train and validation splits",
                            detail={"train": len(train_ids), "valid": len(valid_ids)})
        dataset = self.context.dataset
        scaler = normalize_targets(dataset.labels(train_ids), self.cfg.scale_factor)
        train_targets = dict(zip(train_ids, scaler.forward(dataset.labels(train_ids))))
        valid_labels = dataset.labels(valid_ids)
        valid_mask = valid_labels > 0

        params = self.initial_params(pretrained)
        optimizer = Optimizer(self.cfg.optimizer_config(), self.group_divisors())
        rng = derive_rng(self.seed, "finetune")
        train_ids = list(train_ids)

        best = ParamStore(dict(params), validate=False)
        best_epoch, best_mape = 0, math.inf
        history: List[Dict[str, float]] = []
        epochs = tqdm(range(1, self.cfg.max_epochs + 1), desc="finetune", disable=not settings.progress,
                      leave=False)
        for epoch in epochs:
            order = [train_ids[i] for i in rng.permutation(len(train_ids))]
            losses = []
            for start in range(0, len(order), self.cfg.batch_size):
                ids = order[start:start + self.cfg.batch_size]
                tape, leaves, loss = self.batch_loss(params, ids, np.array([train_targets[i] for i in ids]))
                params = optimizer.step(params, tape.gradient(loss, leaves))
                losses.append(float(loss.value) * len(ids))

            train_loss = float(np.sum(losses) / len(order))
            if valid_mask.any():
                predictions = predict(params, self.context, valid_ids, scaler)
                valid_mape = mape(valid_labels[valid_mask], predictions[valid_mask])
            else:
                valid_mape = math.nan
            history.append({"epoch": epoch, "train_bce": train_loss, "valid_mape": valid_mape})
            logger.training_step("finetune", epoch, train_loss, valid_mape=valid_mape)
            epochs.set_postfix(bce=f"{train_loss:.4f}", valid_mape=f"{valid_mape:.4f}")
            # strict improvement keeps the earliest best epoch
            if valid_mape < best_mape or (math.isnan(valid_mape) and epoch == self.cfg.max_epochs):
                best, best_epoch, best_mape = params, epoch, valid_mape

        logger.stage_summary("finetune", best_epoch=best_epoch, best_valid_mape=best_mape,
                             pretrained=pretrained is not None, n_train=len(train_ids))
        return FineTuneResult(
            params=best,
            scaler=scaler,
            backbone=self.context.backbone,
            best_epoch=best_epoch,
            best_valid_mape=best_mape,
            history=history,
            pretrained=pretrained is not None,
        )


def finetune(context: PipelineContext, cfg: FineTuneConfig, train_ids: Sequence[str],
             valid_ids: Sequence[str], seed: int, pretrained: Optional[ParamStore] = None) -> FineTuneResult:
    return FineTuner(context, cfg, seed).fit(train_ids, valid_ids, pretrained)