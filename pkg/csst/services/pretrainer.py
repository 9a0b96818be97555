"""
Contrastive pretraining service
Trains the backbone, projection and prototype bank with the swapped prediction
objective on augmentation-sampled positive pairs. Labels are never read.
"""

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

from csst.core.config.settings import settings
from csst.core.errors import ConfigError, UnaugmentableError
from csst.models.contrastive import PrototypeBank, project, renormalize, swapped_loss
from csst.models.encoders import BACKBONE_PREFIXES, backbone_forward, init_backbone
from csst.numerics import autodiff as ad
from csst.numerics.autodiff import Tape
from csst.numerics.checkpoint import Checkpoint, rng_state
from csst.numerics.optimizer import Optimizer
from csst.numerics.params import ParamStore, derive_rng
from csst.schemas.config import AugmentConfig, BackboneConfig, PretrainConfig, model_hash
from csst.services.augmentation import AugmentationIndex, build_index, sample_positives
from csst.services.context import PipelineContext
from csst.utils.logger import get_logger, log_function_calls

logger = get_logger(__name__)

LOSS_LOG_COLUMNS = ["step", "loss", "moving_avg", "wall_ms"]


@dataclass
class LossRecord:
    step: int
    loss: float
    moving_avg: float
    wall_ms: float


@dataclass
class PretrainResult:
    """Trained parameters (backbone + projection + prototypes) and the loss trace."""

    params: ParamStore
    losses: List[LossRecord] = field(default_factory=list)
    steps: int = 0
    stopped_early: bool = False
    skipped_anchors: int = 0
    optimizer: Optional[Optimizer] = None
    rng: Optional[np.random.Generator] = None

    @property
    def backbone(self) -> ParamStore:
        return self.params.select(BACKBONE_PREFIXES)

    def loss_frame(self) -> pd.DataFrame:
        return pd.DataFrame([r.__dict__ for r in self.losses], columns=LOSS_LOG_COLUMNS)

    def write_loss_log(self, path: Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.loss_frame().to_csv(path, index=False, float_format="%.10g")
        return path


def _moving_average(values: Sequence[float], window: int) -> float:
    tail = values[-window:]
    return float(np.mean(tail))


class ContrastivePretrainer:
    """Swapped-prediction pretraining over one PipelineContext."""

    def __init__(self, context: PipelineContext, pretrain: PretrainConfig, augment: AugmentConfig,
                 seed: int, index: Optional[AugmentationIndex] = None):
        self.context = context
        self.cfg = pretrain
        self.augment = augment
        self.seed = seed
        self.bank = PrototypeBank(
            n_prototypes=pretrain.n_prototypes,
            prototype_dim=pretrain.prototype_dim,
            temperature=pretrain.temperature,
            projection_layers=pretrain.projection_layers,
        )
        self.index = index or build_index(context.dataset.pois, augment.n_bins_area, augment.n_bins_report)
        self._cached_positives: Dict[str, List[str]] = {}

    @property
    def backbone_cfg(self) -> BackboneConfig:
        return self.context.backbone

    def init_params(self) -> ParamStore:
        backbone = init_backbone(self.backbone_cfg, self.context.dims, derive_rng(self.seed, "backbone"))
        bank = self.bank.init(self.backbone_cfg.hidden_dim, derive_rng(self.seed, "prototypes"))
        return backbone.merged(bank)

    def _positives(self, anchor: str, rng: np.random.Generator) -> List[str]:
        if not self.augment.resample_each_epoch and anchor in self._cached_positives:
            return self._cached_positives[anchor]
        drawn = sample_positives(self.index, anchor, self.augment.m, rng)
        self._cached_positives[anchor] = drawn
        return drawn

    def batch_loss(self, params: ParamStore, anchors: Sequence[str],
                   positives: Sequence[Sequence[str]]):
        """Loss over m anchor-positive pairs per anchor; each POI is encoded once."""
        unique = sorted(set(anchors) | {p for group in positives for p in group})
        row = {pid: i for i, pid in enumerate(unique)}
        m = len(positives[0])
        anchor_rows = np.repeat([row[a] for a in anchors], m)
        positive_rows = np.array([row[p] for group in positives for p in group], dtype=np.int64)

        tape = Tape()
        leaves = tape.watch(params)
        o = backbone_forward(tape, self.context.batch(unique), leaves, self.backbone_cfg)
        z = project(o, leaves)
        loss, _, _ = swapped_loss(
            ad.gather_rows(z, anchor_rows),
            ad.gather_rows(z, positive_rows),
            leaves,
            self.cfg.temperature,
            self.cfg.sinkhorn_iterations,
        )
        return tape, leaves, loss

    @log_function_calls
    def run(self, params: Optional[ParamStore] = None, optimizer: Optional[Optimizer] = None,
            rng: Optional[np.random.Generator] = None, start_step: int = 0) -> PretrainResult:
        if start_step >= self.cfg.max_steps:
            raise ConfigError("checkpoint already reached pretrain.max_steps; raise it to continue",
                              detail={"start_step": start_step, "max_steps": self.cfg.max_steps})
        anchors_all = sorted(pid for pid in self.context.dataset.ids if self.index.augmentable(pid))
        skipped = len(self.context.dataset) - len(anchors_all)
        if not anchors_all:
            raise UnaugmentableError("every anchor lacks a positive pool; pretraining impossible",
                                     detail={"n_pois": len(self.context.dataset)})
        if skipped:
            logger.warning("Skipping unaugmentable anchors", count=skipped)

        params = renormalize(params if params is not None else self.init_params())
        optimizer = optimizer or Optimizer(self.cfg.optimizer_config())
        rng = rng or derive_rng(self.seed, "pretrain")
        result = PretrainResult(params=params, skipped_anchors=skipped)
        window = self.cfg.early_stop_window or 20
        history: List[float] = []

        order: List[str] = []
        step = start_step
        bar = tqdm(total=self.cfg.max_steps, initial=start_step, desc="pretrain",
                   disable=not settings.progress, leave=False)
        start = time.perf_counter()
        while step < self.cfg.max_steps:
            if len(order) < min(self.cfg.batch_size, len(anchors_all)):
                order.extend(anchors_all[i] for i in rng.permutation(len(anchors_all)))
            anchors, order = order[: self.cfg.batch_size], order[self.cfg.batch_size:]
            positives = [self._positives(a, rng) for a in anchors]

            tape, leaves, loss = self.batch_loss(params, anchors, positives)
            grads = tape.gradient(loss, leaves)
            params = renormalize(optimizer.step(params, grads))
            step += 1

            value = float(loss.value)
            history.append(value)
            record = LossRecord(step=step, loss=value, moving_avg=_moving_average(history, window),
                                wall_ms=(time.perf_counter() - start) * 1000.0)
            result.losses.append(record)
            logger.training_step("pretrain", step, value, moving_avg=record.moving_avg)
            bar.update(1)
            bar.set_postfix(loss=f"{value:.4f}")

            if self._plateaued(history):
                result.stopped_early = True
                logger.info("Pretraining loss plateaued", step=step)
                break
        bar.close()

        result.params, result.steps = params, step
        result.optimizer, result.rng = optimizer, rng
        logger.stage_summary("pretrain", steps=step, final_loss=history[-1] if history else None,
                             skipped_anchors=skipped, stopped_early=result.stopped_early)
        return result

    def _plateaued(self, history: Sequence[float]) -> bool:
        w = self.cfg.early_stop_window
        if not w or len(history) < 2 * w:
            return False
        previous = float(np.mean(history[-2 * w:-w]))
        current = float(np.mean(history[-w:]))
        return previous - current < self.cfg.early_stop_tolerance

    def checkpoint(self, result: PretrainResult, config_hash: str) -> Checkpoint:
        return Checkpoint(
            params=result.params,
            meta={
                "stage": "pretrain",
                "config_hash": config_hash,
                "backbone": self.backbone_cfg.model_dump(mode="json"),
                "backbone_hash": model_hash(self.backbone_cfg),
                "pretrain": self.cfg.model_dump(mode="json"),
                "dims": list(self.context.dims),
                "steps": result.steps,
                "feature_scaler": self.context.scaler.to_dict(),
            },
            optimizer_state=result.optimizer.state if result.optimizer else None,
            rng_state=rng_state(result.rng) if result.rng is not None else None,
        )


def pretrain(context: PipelineContext, pretrain_cfg: PretrainConfig, augment: AugmentConfig,
             seed: int) -> PretrainResult:
    """Pretrain on the label-free view of the context's dataset."""
    unlabeled = PipelineContext(
        dataset=context.dataset.unlabeled(),
        scaler=context.scaler,
        features=context.features,
        graph=context.graph,
        instances=context.instances,
        backbone=context.backbone,
    )
    return ContrastivePretrainer(unlabeled, pretrain_cfg, augment, seed).run()
