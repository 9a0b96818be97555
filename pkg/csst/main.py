"""
CSST command-line interface
Subcommands wire a RunConfig to the pipeline stages and write every artifact
into a self-describing run directory.
"""

import functools
from pathlib import Path
from typing import List, Optional

import typer
from rich.console import Console

from csst.core.config.run_config import load_run_config
from csst.core.config.settings import settings
from csst.core.errors import CheckpointError, CSSTError
from csst.numerics.checkpoint import load_checkpoint, restore_rng, save_checkpoint
from csst.numerics.optimizer import Optimizer
from csst.schemas.config import BackboneConfig, BackboneVariant, RunConfig, model_hash
from csst.schemas.dataset import Dataset
from csst.services.artifact_store import RunDirectory
from csst.services.context import PipelineContext
from csst.services.data_io import FeatureScaler, generate_synthetic, load_dataset, report_ratio_median, save_dataset, split
from csst.services.diagnostics import run_gradchecks
from csst.services.evaluation import (cross_validate, evaluate_checkpoint, render_summary, sweep,
                                      write_report)
from csst.services.finetuner import FineTuner
from csst.services.pretrainer import ContrastivePretrainer
from csst.utils.logger import get_logger

app = typer.Typer(name="csst", help="Contrastive self-supervised crowd-flow inference", no_args_is_help=True)
console = Console()
logger = get_logger(__name__)

ConfigOption = typer.Option(None, "--config", "-c", help="YAML run config")
SetOption = typer.Option(None, "--set", "-s", help="Override: section.key=value (repeatable)")
OutputOption = typer.Option(None, "--output", "-o", help="Run directory (default: CSST_OUTPUT_ROOT/<timestamp>)")


def _guard(func):
    """Map pipeline errors to their exit codes."""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except CSSTError as exc:
            logger.error(f"{func.__name__} failed: {exc.message}", error=exc, **exc.detail)
            console.print(f"[bold red]{type(exc).__name__}[/]: {exc.message}")
            raise typer.Exit(code=exc.exit_code)

    return wrapper


def _config(config: Optional[Path], overrides: Optional[List[str]], output: Optional[Path]) -> RunConfig:
    cfg = load_run_config(config, overrides or [])
    if output is not None:
        cfg = cfg.model_copy(update={"output_dir": str(output)})
    return cfg


def _dataset(cfg: RunConfig, run: RunDirectory) -> Dataset:
    paths = cfg.data.resolved_paths()
    if paths is None:
        return generate_synthetic(cfg.synth)
    for label, path in paths.items():
        if path:
            run.record_input(Path(path), label)
    return load_dataset(paths["pois"], paths["reports"], paths["labels"] or None,
                        portrait_groups=cfg.data.portrait_groups)


def _stored_scaler(checkpoint_meta: dict) -> Optional[FeatureScaler]:
    payload = checkpoint_meta.get("feature_scaler")
    return FeatureScaler.from_dict(payload) if payload else None


def _check_compatible(checkpoint_meta: dict, backbone: BackboneConfig, cfg: RunConfig, allow_mismatch: bool):
    if checkpoint_meta.get("config_hash") != cfg.config_hash():
        logger.warning("Checkpoint was produced under a different run config",
                       checkpoint_hash=str(checkpoint_meta.get("config_hash"))[:12], run_hash=cfg.short_hash())
    if checkpoint_meta.get("backbone_hash") != model_hash(backbone):
        if not allow_mismatch:
            raise CheckpointError(
                "checkpoint backbone differs from the configured backbone (pass --allow-mismatch to proceed)",
                detail={"checkpoint": checkpoint_meta.get("backbone_hash"), "config": model_hash(backbone)},
            )
        logger.warning("Proceeding with mismatched backbone checkpoint")


@app.callback()
def main(
    log_level: Optional[str] = typer.Option(None, help="DEBUG, INFO, WARNING, ERROR"),
    log_format: Optional[str] = typer.Option(None, help="standard or json"),
    quiet: bool = typer.Option(False, "--quiet", "-q", help="Disable progress bars"),
):
    if quiet:
        settings.progress = False
    logger.configure(log_level=log_level, log_format=log_format)


@app.command()
@_guard
def generate(config: Optional[Path] = ConfigOption, overrides: Optional[List[str]] = SetOption,
             output: Optional[Path] = OutputOption):
    """Write a synthetic dataset (pois.csv, reports.csv, labels.csv)."""
    cfg = _config(config, overrides, output)
    with RunDirectory(cfg, "generate") as run:
        dataset = generate_synthetic(cfg.synth)
        data_dir = run.file("data")
        for label, path in save_dataset(dataset, data_dir).items():
            run.record_output(label, path)
        ratio = report_ratio_median(dataset)
        run.extra["median_report_ratio"] = ratio
        console.print(f"Wrote {len(dataset)} POIs ({len(dataset.labeled_ids)} labeled) to {data_dir}; "
                      f"median report/flow ratio {ratio:.4f}")


@app.command()
@_guard
def pretrain(config: Optional[Path] = ConfigOption, overrides: Optional[List[str]] = SetOption,
             output: Optional[Path] = OutputOption,
             resume: Optional[Path] = typer.Option(None, help="Continue from a pretraining checkpoint")):
    """Contrastive pretraining; writes pretrain.npz and loss_log.csv."""
    cfg = _config(config, overrides, output)
    with RunDirectory(cfg, "pretrain") as run:
        dataset = _dataset(cfg, run).unlabeled()
        state = None
        if resume is not None:
            run.record_input(resume, "resume")
            state = load_checkpoint(resume)
            _check_compatible(state.meta, cfg.backbone, cfg, allow_mismatch=False)
        scaler = _stored_scaler(state.meta) if state is not None else None
        context = PipelineContext.build(dataset, cfg.graph, cfg.backbone, scaler)
        trainer = ContrastivePretrainer(context, cfg.pretrain, cfg.augment, cfg.seed)
        if state is not None:
            optimizer = Optimizer(cfg.pretrain.optimizer_config(), state=state.optimizer_state)
            rng = restore_rng(state.rng_state) if state.rng_state else None
            result = trainer.run(state.params, optimizer, rng, start_step=int(state.meta.get("steps", 0)))
        else:
            result = trainer.run()
        run.record_output("checkpoint", save_checkpoint(run.file("pretrain.npz"),
                                                        trainer.checkpoint(result, cfg.config_hash())))
        run.record_output("loss_log", result.write_loss_log(run.file("loss_log.csv")))
        final = f"{result.losses[-1].loss:.4f}" if result.losses else "n/a"
        console.print(f"Pretrained {result.steps} steps, final loss {final} -> {run.path}")


@app.command()
@_guard
def finetune(config: Optional[Path] = ConfigOption, overrides: Optional[List[str]] = SetOption,
             output: Optional[Path] = OutputOption,
             checkpoint: Optional[Path] = typer.Option(None, help="Pretrained checkpoint; omit to train from scratch"),
             allow_mismatch: bool = typer.Option(False, help="Proceed when the checkpoint backbone hash differs")):
    """Fine-tune on the configured split; writes model.npz and test-split metrics."""
    cfg = _config(config, overrides, output)
    with RunDirectory(cfg, "finetune") as run:
        dataset = _dataset(cfg, run)
        pretrained, scaler = None, None
        if checkpoint is not None:
            run.record_input(checkpoint, "checkpoint")
            state = load_checkpoint(checkpoint)
            _check_compatible(state.meta, cfg.backbone, cfg, allow_mismatch)
            pretrained, scaler = state.params, _stored_scaler(state.meta)
        context = PipelineContext.build(dataset, cfg.graph, cfg.backbone, scaler)
        train_ids, valid_ids, _ = split(dataset, cfg.train_fraction, cfg.evaluation.valid_fraction,
                                        cfg.fold_index, cfg.evaluation.n_folds, cfg.seed)
        result = FineTuner(context, cfg.finetune, cfg.seed).fit(train_ids, valid_ids, pretrained)
        model = result.checkpoint(cfg.config_hash(), context)
        run.record_output("model", save_checkpoint(run.file("model.npz"), model))
        report = evaluate_checkpoint(model, context, cfg, "test")
        for label, path in write_report(report, run.path).items():
            run.record_output(label, path)
        render_summary(report, console)


@app.command()
@_guard
def evaluate(model: Path = typer.Option(..., help="Fine-tuned model checkpoint"),
             config: Optional[Path] = ConfigOption, overrides: Optional[List[str]] = SetOption,
             output: Optional[Path] = OutputOption,
             split_name: str = typer.Option("test", "--split", help="train, valid or test")):
    """Score a fine-tuned model on a split; writes metrics.json."""
    cfg = _config(config, overrides, output)
    with RunDirectory(cfg, "evaluate") as run:
        run.record_input(model, "model")
        state = load_checkpoint(model)
        backbone = cfg.backbone
        if "backbone" in state.meta:
            # the model is scored with the backbone it was trained with
            backbone = BackboneConfig.model_validate(state.meta["backbone"])
            _check_compatible(state.meta, backbone, cfg, allow_mismatch=False)
        context = PipelineContext.build(_dataset(cfg, run), cfg.graph, backbone, _stored_scaler(state.meta))
        report = evaluate_checkpoint(state, context, cfg, split_name)
        for label, path in write_report(report, run.path).items():
            run.record_output(label, path)
        render_summary(report, console)


@app.command()
@_guard
def ablate(config: Optional[Path] = ConfigOption, overrides: Optional[List[str]] = SetOption,
           output: Optional[Path] = OutputOption,
           workers: Optional[int] = typer.Option(None, help="Worker processes (default CSST_WORKERS)")):
    """Cross-validation grid: variants x {scratch, pretrained} x label fractions x folds."""
    cfg = _config(config, overrides, output)
    with RunDirectory(cfg, "ablate") as run:
        report = cross_validate(_dataset(cfg, run), cfg, workers or settings.workers)
        for label, path in write_report(report, run.path).items():
            run.record_output(label, path)
        render_summary(report, console)


@app.command("sweep")
@_guard
def sweep_command(config: Optional[Path] = ConfigOption, overrides: Optional[List[str]] = SetOption,
                  output: Optional[Path] = OutputOption,
                  workers: Optional[int] = typer.Option(None, help="Worker processes (default CSST_WORKERS)")):
    """Sensitivity of CSST-MSFNet to the number of positives and the prototype dimension."""
    cfg = _config(config, overrides, output)
    with RunDirectory(cfg, "sweep") as run:
        report = sweep(_dataset(cfg, run), cfg, workers or settings.workers)
        for label, path in write_report(report, run.path).items():
            run.record_output(label, path)
        render_summary(report, console)


@app.command()
@_guard
def gradcheck(seeds: int = typer.Option(5, min=1, help="Random problems per check"),
              variant: Optional[List[BackboneVariant]] = typer.Option(None, help="Restrict to variants"),
              tolerance: float = typer.Option(1e-4, help="Maximum relative error"),
              entries: int = typer.Option(2, min=1, help="Entries sampled per tensor")):
    """Compare tape gradients with central finite differences on toy problems."""
    cases = run_gradchecks(list(range(seeds)), variant or None, tolerance, entries)
    worst = max(cases, key=lambda c: c.result.max_rel_error)
    console.print(f"{len(cases)} checks passed; worst {worst.name} seed {worst.seed}: "
                  f"{worst.result.max_rel_error:.2e}")


if __name__ == "__main__":
    app()
