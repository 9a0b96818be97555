"""
Target scaling and supervised fine-tuning.
"""

import numpy as np
import pytest

from csst.core.errors import CheckpointError, DataError
from csst.models.encoders import BACKBONE_PREFIXES, init_backbone
from csst.numerics.checkpoint import Checkpoint
from csst.numerics.params import ParamStore, derive_rng
from csst.schemas.config import BackboneVariant, FineTuneConfig
from csst.services.finetuner import (CLAMP_HIGH, FineTuner, finetune, normalize_targets, predict,
                                     scaler_from_checkpoint)
from csst.services.metrics import mape

from conftest import tiny_backbone


def split_ids(context, n_train=50, n_valid=10):
    labeled = context.dataset.labeled_ids
    return labeled[:n_train], labeled[n_train:n_train + n_valid]


def test_scaler_arithmetic():
    scaler = normalize_targets([10.0, 50.0, 100.0])
    assert scaler.scale == pytest.approx(120.0, abs=1e-12)
    assert scaler.forward(60.0) == pytest.approx(0.5, abs=1e-15)
    labels = np.array([1.0, 10.0, 50.0, 100.0])
    assert np.allclose(scaler.inverse(scaler.forward(labels)), labels, rtol=1e-15, atol=0)


def test_scaler_clamps_out_of_range_labels():
    scaler = normalize_targets([10.0, 50.0, 100.0])
    assert scaler.forward(150.0) == CLAMP_HIGH
    assert scaler.forward(0.0) == 1e-6


def test_scaler_needs_a_positive_label():
    with pytest.raises(DataError):
        normalize_targets([0.0, 0.0])
    with pytest.raises(DataError):
        normalize_targets([])


def test_frozen_backbone_is_bit_identical(msfnet_context):
    cfg = FineTuneConfig(lr_divisor=float("inf"), batch_size=16, max_epochs=2)
    tuner = FineTuner(msfnet_context, cfg, seed=0)
    train, valid = split_ids(msfnet_context)
    initial = tuner.initial_params()
    result = tuner.fit(train, valid)
    assert result.params.select(BACKBONE_PREFIXES).bit_equal(initial.select(BACKBONE_PREFIXES))
    assert not result.params.select(["f_o/"]).bit_equal(initial.select(["f_o/"]))


def test_full_batch_loss_decreases(msfnet_context):
    cfg = FineTuneConfig(learning_rate=0.05, batch_size=50, max_epochs=100)
    train, valid = split_ids(msfnet_context)
    result = finetune(msfnet_context, cfg, train, valid, seed=1)
    bce = [entry["train_bce"] for entry in result.history]
    assert len(bce) == 100
    assert bce[-1] < bce[0]


def test_head_init_does_not_depend_on_backbone_source(msfnet_context):
    tuner = FineTuner(msfnet_context, FineTuneConfig(), seed=3)
    other = init_backbone(msfnet_context.backbone, msfnet_context.dims, derive_rng(99, "backbone"))
    scratch = tuner.initial_params()
    warm = tuner.initial_params(other)
    assert scratch.select(["f_o/"]).bit_equal(warm.select(["f_o/"]))
    assert warm.select(BACKBONE_PREFIXES).bit_equal(other)
    assert not scratch.select(BACKBONE_PREFIXES).bit_equal(other)


def test_incompatible_pretrained_backbone(msfnet_context):
    stgnn = init_backbone(tiny_backbone(BackboneVariant.STGNN), msfnet_context.dims, derive_rng(0, "backbone"))
    with pytest.raises(CheckpointError):
        FineTuner(msfnet_context, FineTuneConfig(), seed=0).initial_params(stgnn)


def test_empty_split_rejected(msfnet_context):
    train, _ = split_ids(msfnet_context)
    with pytest.raises(DataError):
        FineTuner(msfnet_context, FineTuneConfig(max_epochs=1), seed=0).fit(train, [])


def test_best_validation_epoch_is_returned(msfnet_context):
    cfg = FineTuneConfig(learning_rate=0.05, batch_size=16, max_epochs=6)
    train, valid = split_ids(msfnet_context)
    result = finetune(msfnet_context, cfg, train, valid, seed=2)
    scores = [entry["valid_mape"] for entry in result.history]
    assert result.best_valid_mape == min(scores)
    assert result.best_epoch == scores.index(min(scores)) + 1

    labels = msfnet_context.dataset.labels(valid)
    predictions = predict(result.params, msfnet_context, valid, result.scaler)
    assert mape(labels, predictions) == pytest.approx(result.best_valid_mape, rel=1e-12)
    assert np.all(predictions > 0) and np.all(predictions < result.scaler.scale)


def test_checkpoint_carries_target_scale(msfnet_context):
    cfg = FineTuneConfig(batch_size=32, max_epochs=1)
    train, valid = split_ids(msfnet_context)
    result = finetune(msfnet_context, cfg, train, valid, seed=0)
    checkpoint = result.checkpoint("deadbeef", msfnet_context)
    assert checkpoint.config_hash == "deadbeef"
    assert scaler_from_checkpoint(checkpoint).scale == result.scaler.scale
    assert checkpoint.meta["pretrained"] is False

    with pytest.raises(CheckpointError):
        scaler_from_checkpoint(Checkpoint(params=ParamStore({"f_o/b": [0.0]}), meta={"config_hash": "x"}))
