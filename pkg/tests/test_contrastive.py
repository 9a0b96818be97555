"""
Prototype scoring, Sinkhorn codes, the swapped loss and the pretraining loop.
"""

import math

import numpy as np
import pandas as pd
import pytest

from csst.core.errors import ConfigError, NumericError, UnaugmentableError
from csst.models.contrastive import (PROTOTYPES, PrototypeBank, project, prototype_probs, sinkhorn_codes,
                                     swapped_loss)
from csst.models.encoders import BACKBONE_PREFIXES
from csst.numerics.autodiff import Tape
from csst.numerics.params import ParamStore
from csst.schemas.config import AugmentConfig, PretrainConfig
from csst.services.augmentation import build_index
from csst.services.pretrainer import LOSS_LOG_COLUMNS, ContrastivePretrainer, pretrain


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def cosine_scores(seed, b, k, d=64):
    rng = np.random.default_rng(seed)
    return unit_rows(rng, b, d) @ unit_rows(rng, k, d).T


# ---------------------------------------------------------------------------
# prototype probabilities

def test_equal_scores_give_uniform_probabilities():
    assert np.allclose(prototype_probs(np.full((1, 4), 0.3), 0.05), 0.25, rtol=0, atol=1e-15)


def test_probability_examples():
    assert prototype_probs(np.array([1.0, 0.0]), 1.0)[0] == pytest.approx(math.e / (math.e + 1.0), abs=1e-15)
    sharp = prototype_probs(np.array([1.0, 0.0]), 0.05)[0]
    assert sharp == pytest.approx(1.0 - 2.0611536e-9, abs=1e-15)


def test_probabilities_sum_to_one_and_ignore_shifts():
    scores = cosine_scores(0, 32, 16)
    probs = prototype_probs(scores, 0.05)
    assert np.all(probs > 0)
    assert np.allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert np.allclose(prototype_probs(scores + 0.7, 0.05), probs, rtol=0, atol=1e-12)


def test_probabilities_reject_bad_temperature():
    with pytest.raises(ConfigError):
        prototype_probs(np.zeros(3), 0.0)


# ---------------------------------------------------------------------------
# Sinkhorn codes

def test_uniform_scores_are_a_fixed_point():
    codes = sinkhorn_codes(np.zeros((4, 8)), n_iters=3, temperature=0.05)
    assert np.allclose(codes, 1.0 / 8, rtol=0, atol=1e-15)


def test_single_row_codes():
    scores = np.array([[0.4, -0.1]])
    assert np.allclose(sinkhorn_codes(scores, 0, 0.5), prototype_probs(scores, 0.5), rtol=0, atol=1e-15)
    assert np.allclose(sinkhorn_codes(scores, 3, 0.5), [[0.5, 0.5]], rtol=0, atol=1e-15)


@pytest.mark.parametrize("shape", [(4, 2), (16, 8), (32, 64), (64, 512)])
def test_codes_balance_rows_and_columns(shape):
    b, k = shape
    codes = sinkhorn_codes(cosine_scores(sum(shape), b, k), n_iters=3, temperature=1.0)
    assert np.allclose(codes.sum(axis=1), 1.0, rtol=0, atol=1e-9)
    assert np.allclose(codes.sum(axis=0), b / k, rtol=0, atol=1e-3)


def test_column_balance_improves_with_iterations():
    scores = cosine_scores(3, 16, 8)
    errors = []
    for n_iters in range(5):
        codes = sinkhorn_codes(scores, n_iters, 1.0)
        errors.append(np.abs(codes.sum(axis=0) - 2.0).max())
    assert all(later < earlier for earlier, later in zip(errors, errors[1:]))


def test_sinkhorn_errors():
    with pytest.raises(NumericError):
        sinkhorn_codes(np.array([[np.nan, 0.0]]), 3)
    with pytest.raises(ConfigError):
        sinkhorn_codes(np.zeros((3, 1)), 3)
    with pytest.raises(ConfigError):
        sinkhorn_codes(np.zeros((3, 2)), -1)
    with pytest.raises(ConfigError):
        sinkhorn_codes(np.zeros((3, 2)), 3, temperature=0.0)


def test_sharp_temperature_keeps_codes_finite():
    scores = np.array([[-1.0, 1.0], [-1.0, 0.9], [-1.0, 0.8], [-1.0, 0.7]])
    codes = sinkhorn_codes(scores, n_iters=3, temperature=0.001)
    assert np.all(np.isfinite(codes))
    assert np.allclose(codes.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert np.all(codes[:, 0] > 0)


def test_wide_logit_spread_is_balanced():
    codes = sinkhorn_codes(np.array([[0.0, 800.0], [0.0, 800.0]]), n_iters=3, temperature=1.0)
    assert np.allclose(codes, 0.5, rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# swapped loss

def _loss(z_a, z_p, prototypes, temperature=0.1, n_iters=3):
    tape = Tape()
    leaves = tape.watch(ParamStore({PROTOTYPES: prototypes}))
    loss, _, _ = swapped_loss(tape.constant(z_a), tape.constant(z_p), leaves, temperature, n_iters)
    return float(loss.value)


def test_uniform_scores_give_two_log_k():
    rng = np.random.default_rng(0)
    row = unit_rows(rng, 1, 3)
    prototypes = np.repeat(row, 4, axis=0)
    value = _loss(unit_rows(rng, 5, 3), unit_rows(rng, 5, 3), prototypes, temperature=0.05)
    assert value == pytest.approx(2.0 * math.log(4), abs=1e-12)


def test_swapped_loss_is_symmetric():
    rng = np.random.default_rng(1)
    z_a, z_p, prototypes = unit_rows(rng, 6, 4), unit_rows(rng, 6, 4), unit_rows(rng, 5, 4)
    assert _loss(z_a, z_p, prototypes) == pytest.approx(_loss(z_p, z_a, prototypes), abs=1e-15)


def _reference_loss(z_a, z_p, prototypes, temperature, n_iters):
    """Straight-line loops over rows and prototypes."""

    def codes(z):
        rows, cols = len(z), len(prototypes)
        logits = [[sum(z[i][j] * prototypes[k][j] for j in range(len(z[i]))) / temperature
                   for k in range(cols)] for i in range(rows)]
        top = max(max(r) for r in logits)
        q = [[math.exp(v - top) for v in r] for r in logits]
        for _ in range(n_iters):
            col = [sum(q[i][k] for i in range(rows)) for k in range(cols)]
            q = [[q[i][k] * (rows / cols) / col[k] for k in range(cols)] for i in range(rows)]
            q = [[v / sum(r) for v in r] for r in q]
        return [[v / sum(r) for v in r] for r in q], logits

    def cross_entropy(q, logits):
        total = 0.0
        for q_row, l_row in zip(q, logits):
            norm = math.log(sum(math.exp(v) for v in l_row))
            total -= sum(qk * (lk - norm) for qk, lk in zip(q_row, l_row))
        return total / len(q)

    q_a, l_a = codes(z_a)
    q_p, l_p = codes(z_p)
    return cross_entropy(q_p, l_a) + cross_entropy(q_a, l_p)


def test_swapped_loss_matches_reference():
    z_a = np.array([[1.0, 0.0], [0.6, 0.8]])
    z_p = np.array([[0.8, 0.6], [0.0, 1.0]])
    prototypes = np.array([[1.0, 0.0], [0.0, 1.0]])
    expected = _reference_loss(z_a.tolist(), z_p.tolist(), prototypes.tolist(), 0.5, 3)
    assert _loss(z_a, z_p, prototypes, temperature=0.5) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_swapped_loss_is_non_negative(seed):
    rng = np.random.default_rng(seed)
    assert _loss(unit_rows(rng, 8, 6), unit_rows(rng, 8, 6), unit_rows(rng, 4, 6), temperature=0.05) >= 0.0


def test_projection_scale_does_not_change_loss():
    rng = np.random.default_rng(2)
    bank = PrototypeBank(n_prototypes=4, prototype_dim=5, temperature=0.1)
    params = bank.init(6, rng)
    o_a, o_p = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))

    def loss_for(store):
        tape = Tape()
        leaves = tape.watch(store)
        value, _, _ = swapped_loss(project(tape.constant(o_a), leaves), project(tape.constant(o_p), leaves),
                                   leaves, 0.1, 3)
        return float(value.value)

    scaled = params.replace("proj/layer0/W", 7.5 * params["proj/layer0/W"]).replace(
        "proj/layer0/b", 7.5 * params["proj/layer0/b"])
    assert loss_for(scaled) == pytest.approx(loss_for(params), abs=1e-12)


def test_bank_validation():
    with pytest.raises(ConfigError):
        PrototypeBank(n_prototypes=1, prototype_dim=4, temperature=0.1)
    with pytest.raises(ConfigError):
        PrototypeBank(n_prototypes=4, prototype_dim=4, temperature=0.0)


# ---------------------------------------------------------------------------
# pretraining loop

SMALL_AUGMENT = AugmentConfig(n_bins_area=3, n_bins_report=3, m=2)


def small_pretrain(**overrides):
    fields = dict(n_prototypes=8, prototype_dim=16, temperature=0.1, batch_size=16, max_steps=3)
    fields.update(overrides)
    return PretrainConfig(**fields)


def test_initial_loss_near_closed_form(stgnn_context):
    cfg = PretrainConfig(batch_size=32)
    trainer = ContrastivePretrainer(stgnn_context, cfg, SMALL_AUGMENT, seed=0)
    rng = np.random.default_rng(0)
    anchors = [pid for pid in stgnn_context.dataset.ids if trainer.index.augmentable(pid)][:32]
    positives = [trainer._positives(a, rng) for a in anchors]
    _, _, loss = trainer.batch_loss(trainer.init_params(), anchors, positives)
    closed_form = 2.0 * math.log(cfg.n_prototypes)
    assert 0.8 * closed_form <= float(loss.value) <= 1.2 * closed_form


def test_prototypes_stay_unit_norm(msfnet_context):
    result = ContrastivePretrainer(msfnet_context, small_pretrain(), SMALL_AUGMENT, seed=1).run()
    assert result.steps == 3
    norms = np.linalg.norm(result.params[PROTOTYPES], axis=1)
    assert np.allclose(norms, 1.0, rtol=0, atol=1e-12)


def test_same_seed_same_checkpoint(msfnet_context):
    first = ContrastivePretrainer(msfnet_context, small_pretrain(), SMALL_AUGMENT, seed=2).run()
    second = ContrastivePretrainer(msfnet_context, small_pretrain(), SMALL_AUGMENT, seed=2).run()
    assert first.params.bit_equal(second.params)
    assert [r.loss for r in first.losses] == [r.loss for r in second.losses]


def test_every_anchor_unaugmentable(msfnet_context):
    lonely = build_index([msfnet_context.dataset.pois[0]], 2, 2)
    trainer = ContrastivePretrainer(msfnet_context, small_pretrain(), SMALL_AUGMENT, seed=0, index=lonely)
    with pytest.raises(UnaugmentableError):
        trainer.run()


def test_fixed_positives_are_reused(msfnet_context):
    augment = AugmentConfig(n_bins_area=2, n_bins_report=2, m=3, resample_each_epoch=False)
    trainer = ContrastivePretrainer(msfnet_context, small_pretrain(), augment, seed=0)
    anchor = next(pid for pid in msfnet_context.dataset.ids if trainer.index.pool(pid))
    first = trainer._positives(anchor, np.random.default_rng(0))
    assert trainer._positives(anchor, np.random.default_rng(99)) is first


def test_loss_log(msfnet_context, tmp_path):
    result = ContrastivePretrainer(msfnet_context, small_pretrain(max_steps=4), SMALL_AUGMENT, seed=0).run()
    frame = pd.read_csv(result.write_loss_log(tmp_path / "loss_log.csv"))
    assert list(frame.columns) == LOSS_LOG_COLUMNS
    assert frame["step"].tolist() == [1, 2, 3, 4]
    assert np.all(np.isfinite(frame["loss"]))
    assert frame["wall_ms"].is_monotonic_increasing


def test_plateau_stops_training(msfnet_context):
    cfg = small_pretrain(max_steps=50, early_stop_window=2, early_stop_tolerance=1e9)
    result = ContrastivePretrainer(msfnet_context, cfg, SMALL_AUGMENT, seed=0).run()
    assert result.stopped_early
    assert result.steps == 4


def test_pretrain_returns_backbone_groups(msfnet_context):
    result = pretrain(msfnet_context, small_pretrain(max_steps=2), SMALL_AUGMENT, seed=0)
    assert result.backbone
    assert all(name.startswith(BACKBONE_PREFIXES) for name in result.backbone)
    assert "protos/C" in result.params and "protos/C" not in result.backbone


@pytest.mark.slow
def test_loss_trends_down_over_two_hundred_steps(stgnn_context):
    cfg = small_pretrain(max_steps=200, batch_size=64, n_prototypes=16, prototype_dim=32)
    result = ContrastivePretrainer(stgnn_context, cfg, AugmentConfig(n_bins_area=4, n_bins_report=4, m=4),
                                   seed=0).run()
    losses = np.array([r.loss for r in result.losses])
    assert np.all(np.isfinite(losses))
    assert losses[-20:].mean() < losses[:20].mean()
