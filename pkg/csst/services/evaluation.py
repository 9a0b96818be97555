"""
Evaluation service
Split-level scoring, the cross-validation grid over backbones, pretraining flag
and label fraction, and the positives / prototype-dimension sensitivity sweep.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import product
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from rich.console import Console
from rich.table import Table

from csst.core.errors import ConfigError
from csst.numerics.checkpoint import Checkpoint
from csst.numerics.params import ParamStore
from csst.schemas.config import BackboneVariant, RunConfig
from csst.schemas.dataset import Dataset
from csst.schemas.metrics import AccGain, CellMetrics, CellSummary, MetricsReport
from csst.services.context import PipelineContext
from csst.services.data_io import split
from csst.services.finetuner import FineTuner, TargetScaler, predict, scaler_from_checkpoint
from csst.services.metrics import score
from csst.services.pretrainer import pretrain
from csst.utils.logger import get_logger, log_function_calls

logger = get_logger(__name__)

SPLIT_NAMES = ("train", "valid", "test")


@dataclass(frozen=True)
class GridCell:
    variant: BackboneVariant
    pretrained: bool
    fraction: float
    fold: int
    positives: Optional[int] = None
    prototype_dim: Optional[int] = None

    @property
    def pretrain_key(self) -> Tuple[str, Optional[int], Optional[int]]:
        return self.variant.value, self.positives, self.prototype_dim


def evaluate_split(params: ParamStore, context: PipelineContext, ids: Sequence[str], scaler: TargetScaler,
                   epsilon: float) -> Dict[str, float]:
    predictions = predict(params, context, ids, scaler)
    return score(context.dataset.labels(ids), predictions, epsilon)


class GridRunner:
    """Runs grid cells against one dataset; contexts and pretrained backbones are cached per key."""

    def __init__(self, dataset: Dataset, cfg: RunConfig, base: Optional[PipelineContext] = None):
        self.dataset = dataset
        self.cfg = cfg
        self._base = base
        self._contexts: Dict[str, PipelineContext] = {}

    def context(self, variant: BackboneVariant) -> PipelineContext:
        if variant.value not in self._contexts:
            backbone = self.cfg.backbone.model_copy(update={"variant": variant})
            if self._base is None:
                self._base = PipelineContext.build(self.dataset, self.cfg.graph, backbone)
            self._contexts[variant.value] = self._base.with_backbone(backbone)
        return self._contexts[variant.value]

    def pretrain_backbone(self, variant: BackboneVariant, positives: Optional[int] = None,
                          prototype_dim: Optional[int] = None) -> ParamStore:
        pretrain_cfg = self.cfg.pretrain
        augment_cfg = self.cfg.augment
        if prototype_dim is not None:
            pretrain_cfg = pretrain_cfg.model_copy(update={"prototype_dim": prototype_dim})
        if positives is not None:
            augment_cfg = augment_cfg.model_copy(update={"m": positives})
        logger.info("Pretraining backbone for grid", variant=variant.value, m=augment_cfg.m,
                    prototype_dim=pretrain_cfg.prototype_dim)
        return pretrain(self.context(variant), pretrain_cfg, augment_cfg, self.cfg.seed).backbone

    def run_cell(self, cell: GridCell, pretrained: Optional[ParamStore]) -> CellMetrics:
        context = self.context(cell.variant)
        evaluation = self.cfg.evaluation
        train_ids, valid_ids, test_ids = split(self.dataset, cell.fraction, evaluation.valid_fraction,
                                               cell.fold, evaluation.n_folds, self.cfg.seed)
        result = FineTuner(context, self.cfg.finetune, self.cfg.seed).fit(train_ids, valid_ids, pretrained)
        metrics = evaluate_split(result.params, context, test_ids, result.scaler, evaluation.epsilon)
        logger.info("Grid cell finished", variant=cell.variant.value, pretrained=cell.pretrained,
                    fraction=cell.fraction, fold=cell.fold, mape=metrics["mape"], acc=metrics["acc"])
        return CellMetrics(
            dataset=self.cfg.dataset_name,
            variant=cell.variant.value,
            pretrained=cell.pretrained,
            fraction=cell.fraction,
            fold=cell.fold,
            best_epoch=result.best_epoch,
            positives=cell.positives,
            prototype_dim=cell.prototype_dim,
            **metrics,
        )


_WORKER: Dict[str, object] = {}


def _init_worker(dataset: Dataset, cfg_json: str, pretrained: Dict[Tuple, ParamStore]) -> None:
    _WORKER["runner"] = GridRunner(dataset, RunConfig.model_validate_json(cfg_json))
    _WORKER["pretrained"] = pretrained


def _run_in_worker(cell: GridCell) -> CellMetrics:
    runner: GridRunner = _WORKER["runner"]
    pretrained = _WORKER["pretrained"].get(cell.pretrain_key) if cell.pretrained else None
    return runner.run_cell(cell, pretrained)


def run_grid(dataset: Dataset, cfg: RunConfig, cells: List[GridCell], workers: int = 1,
             base: Optional[PipelineContext] = None) -> List[CellMetrics]:
    """Pretrain what the cells need, then fine-tune every cell; output order is the cell order."""
    runner = GridRunner(dataset, cfg, base)
    pretrained: Dict[Tuple, ParamStore] = {}
    for cell in cells:
        if cell.pretrained and cell.pretrain_key not in pretrained:
            pretrained[cell.pretrain_key] = runner.pretrain_backbone(cell.variant, cell.positives,
                                                                     cell.prototype_dim)
    if workers <= 1:
        return [runner.run_cell(cell, pretrained.get(cell.pretrain_key) if cell.pretrained else None)
                for cell in cells]

    logger.info("Dispatching grid to worker processes", workers=workers, cells=len(cells))
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                             initargs=(dataset, cfg.model_dump_json(), pretrained)) as pool:
        return list(pool.map(_run_in_worker, cells))


def ablation_cells(cfg: RunConfig) -> List[GridCell]:
    evaluation = cfg.evaluation
    return [
        GridCell(variant=variant, pretrained=flag, fraction=fraction, fold=fold)
        for variant, flag, fraction, fold in product(
            evaluation.variants, evaluation.pretrain_flags, evaluation.label_fractions, range(evaluation.n_folds)
        )
    ]


def sweep_cells(cfg: RunConfig) -> List[GridCell]:
    evaluation = cfg.evaluation
    return [
        GridCell(variant=BackboneVariant.MSFNET, pretrained=True, fraction=evaluation.sweep_fraction, fold=fold,
                 positives=m, prototype_dim=d_c)
        for m, d_c, fold in product(
            evaluation.sweep_positives, evaluation.sweep_prototype_dims,
            range(min(evaluation.sweep_folds, evaluation.n_folds)),
        )
    ]


def summarize(cells: Sequence[CellMetrics]) -> List[CellSummary]:
    groups: Dict[Tuple, List[CellMetrics]] = {}
    for cell in cells:
        key = (cell.variant, cell.pretrained, cell.fraction, cell.positives, cell.prototype_dim)
        groups.setdefault(key, []).append(cell)
    summary = []
    for (variant, pretrained, fraction, positives, prototype_dim), members in groups.items():
        mapes = np.array([c.mape for c in members])
        accs = np.array([c.acc for c in members])
        summary.append(CellSummary(
            variant=variant, pretrained=pretrained, fraction=fraction, positives=positives,
            prototype_dim=prototype_dim, n_folds=len(members),
            mape_mean=float(mapes.mean()), mape_std=float(mapes.std()),
            acc_mean=float(accs.mean()), acc_std=float(accs.std()),
        ))
    return summary


def acc_gains(summary: Sequence[CellSummary]) -> List[AccGain]:
    by_key = {(s.variant, s.fraction, s.pretrained): s for s in summary if s.positives is None}
    gains = []
    for (variant, fraction, pretrained), scratch in by_key.items():
        if pretrained or (variant, fraction, True) not in by_key:
            continue
        tuned = by_key[(variant, fraction, True)]
        delta = tuned.acc_mean - scratch.acc_mean
        gains.append(AccGain(
            variant=variant, fraction=fraction, scratch_acc=scratch.acc_mean, pretrained_acc=tuned.acc_mean,
            absolute_gain=delta, relative_gain=delta / scratch.acc_mean if scratch.acc_mean > 0 else None,
        ))
    return gains


def _report(cfg: RunConfig, cells: List[CellMetrics], kind: str, split_name: Optional[str] = None) -> MetricsReport:
    summary = summarize(cells)
    return MetricsReport(
        dataset=cfg.dataset_name,
        config_hash=cfg.config_hash(),
        seed=cfg.seed,
        epsilon=cfg.evaluation.epsilon,
        kind=kind,
        split=split_name,
        cells=cells,
        summary=summary,
        gains=acc_gains(summary) if kind == "ablation" else [],
    )


@log_function_calls
def cross_validate(dataset: Dataset, cfg: RunConfig, workers: int = 1,
                   base: Optional[PipelineContext] = None) -> MetricsReport:
    """Full grid: variants x pretraining flag x label fractions x folds."""
    cells = ablation_cells(cfg)
    if not cells:
        raise ConfigError("the evaluation grid is empty")
    return _report(cfg, run_grid(dataset, cfg, cells, workers, base), "ablation")


@log_function_calls
def sweep(dataset: Dataset, cfg: RunConfig, workers: int = 1,
          base: Optional[PipelineContext] = None) -> MetricsReport:
    """Sensitivity of pretrained MSFNet to m and d_c at one label fraction."""
    return _report(cfg, run_grid(dataset, cfg, sweep_cells(cfg), workers, base), "sweep")


def evaluate_checkpoint(checkpoint: Checkpoint, context: PipelineContext, cfg: RunConfig,
                        split_name: str = "test") -> MetricsReport:
    """Score a fine-tuned model on a named split of the configured fold."""
    if split_name not in SPLIT_NAMES:
        raise ConfigError(f"unknown split {split_name!r}; expected one of {SPLIT_NAMES}")
    parts = dict(zip(SPLIT_NAMES, split(context.dataset, cfg.train_fraction, cfg.evaluation.valid_fraction,
                                        cfg.fold_index, cfg.evaluation.n_folds, cfg.seed)))
    metrics = evaluate_split(checkpoint.params, context, parts[split_name], scaler_from_checkpoint(checkpoint),
                             cfg.evaluation.epsilon)
    cell = CellMetrics(
        dataset=cfg.dataset_name,
        variant=context.backbone.variant.value,
        pretrained=bool(checkpoint.meta.get("pretrained", False)),
        fraction=cfg.train_fraction,
        fold=cfg.fold_index,
        best_epoch=checkpoint.meta.get("best_epoch"),
        **metrics,
    )
    return _report(cfg, [cell], "evaluation", split_name)


def write_report(report: MetricsReport, directory: Path) -> Dict[str, Path]:
    """metrics.json (canonical), metrics.csv (one row per cell) and summary.csv."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "metrics_json": directory / "metrics.json",
        "metrics_csv": directory / "metrics.csv",
        "summary_csv": directory / "summary.csv",
    }
    paths["metrics_json"].write_text(report.canonical_json(), encoding="utf-8")
    report.cells_frame().to_csv(paths["metrics_csv"], index=False)
    report.summary_frame().to_csv(paths["summary_csv"], index=False)
    return paths


def render_summary(report: MetricsReport, console: Optional[Console] = None) -> None:
    console = console or Console()
    table = Table(title=f"{report.kind} on {report.dataset} (eps={report.epsilon})")
    for column in ("variant", "pretrained", "fraction", "m", "d_c", "folds", "MAPE", "ACC"):
        table.add_column(column, justify="right" if column not in ("variant",) else "left")
    for s in report.summary:
        table.add_row(
            ("CSST-" if s.pretrained else "") + s.variant,
            "yes" if s.pretrained else "no",
            f"{s.fraction:.0%}",
            "-" if s.positives is None else str(s.positives),
            "-" if s.prototype_dim is None else str(s.prototype_dim),
            str(s.n_folds),
            f"{s.mape_mean:.4f} ± {s.mape_std:.4f}",
            f"{s.acc_mean:.4f} ± {s.acc_std:.4f}",
        )
    console.print(table)
    for gain in report.gains:
        relative = "n/a" if gain.relative_gain is None else f"{gain.relative_gain:+.1%}"
        console.print(f"  {gain.variant} @ {gain.fraction:.0%}: ACC gain {gain.absolute_gain:+.4f} ({relative})")
