"""
Parameter store, optimizers and the checkpoint container.
"""

import numpy as np
import pytest

from csst.core.errors import CheckpointError, NumericError, ShapeError
from csst.numerics.checkpoint import Checkpoint, load_checkpoint, restore_rng, rng_state, save_checkpoint
from csst.numerics.optimizer import Optimizer, OptimizerState, divisor_for, sgd_step
from csst.numerics.params import ParamStore, derive_rng
from csst.schemas.config import OptimizerConfig, OptimizerName


def _sgd(lr, wd=0.0):
    return OptimizerConfig(learning_rate=lr, weight_decay=wd)


def test_sgd_hand_arithmetic():
    updated = sgd_step(ParamStore({"w": [1.0]}), ParamStore({"w": [0.5]}), _sgd(0.1))
    assert updated["w"][0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_zero_gradient_is_identity():
    params = ParamStore({"w": np.arange(6.0).reshape(2, 3)})
    updated = sgd_step(params, params.zeros_like(), _sgd(0.3))
    assert updated.bit_equal(params)


def test_sgd_weight_decay_term():
    updated = sgd_step(ParamStore({"w": [2.0]}), ParamStore({"w": [0.0]}), _sgd(0.5, wd=0.1))
    assert updated["w"][0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0, abs=1e-15)


def test_backbone_divisor_scales_step():
    params = ParamStore({"f_a/stack/layer0/W": [[0.0]], "f_o/W": [[0.0]]})
    grads = ParamStore({"f_a/stack/layer0/W": [[1.0]], "f_o/W": [[1.0]]})
    updated = sgd_step(params, grads, _sgd(0.001), {"f_a/": 10.0})
    assert updated["f_a/stack/layer0/W"][0, 0] == pytest.approx(-0.0001, abs=1e-18)
    assert updated["f_o/W"][0, 0] == pytest.approx(-0.001, abs=1e-18)


def test_infinite_divisor_freezes_group():
    rng = np.random.default_rng(0)
    params = ParamStore({"f_n/stack/layer0/W": rng.normal(size=(3, 2)), "f_o/b": rng.normal(size=(1,))})
    grads = ParamStore({k: rng.normal(size=v.shape) for k, v in params.items()})
    updated = sgd_step(params, grads, _sgd(0.5, wd=1e-4), {"f_n/": float("inf")})
    assert updated["f_n/stack/layer0/W"].tobytes() == params["f_n/stack/layer0/W"].tobytes()
    assert not np.array_equal(updated["f_o/b"], params["f_o/b"])


def test_longest_prefix_wins():
    assert divisor_for("f_g/round0/layer0/W", {"f_": 2.0, "f_g/": 5.0}) == 5.0
    assert divisor_for("proj/layer0/W", {"f_g/": 5.0}) == 1.0
    assert divisor_for("anything", None) == 1.0


def test_sgd_rejects_misaligned_gradients():
    params = ParamStore({"w": np.ones((2, 2))})
    with pytest.raises(ShapeError):
        sgd_step(params, ParamStore({"w": np.ones((2, 3))}), _sgd(0.1))
    with pytest.raises(ShapeError):
        sgd_step(params, ParamStore({"v": np.ones((2, 2))}), _sgd(0.1))


def test_sgd_rejects_non_finite_gradient():
    params = ParamStore({"w": np.ones(2)})
    grads = ParamStore({"w": np.array([np.nan, 0.0])}, validate=False)
    with pytest.raises(NumericError):
        sgd_step(params, grads, _sgd(0.1))


def test_adam_first_step_moves_by_learning_rate():
    cfg = OptimizerConfig(name=OptimizerName.ADAM, learning_rate=0.01, weight_decay=0.0)
    params = ParamStore({"w": [1.0, -1.0]})
    updated = Optimizer(cfg).step(params, ParamStore({"w": [3.0, -0.2]}))
    assert np.allclose(updated["w"], [0.99, -0.99], atol=1e-8)


def test_momentum_accumulates_velocity():
    cfg = OptimizerConfig(name=OptimizerName.MOMENTUM, learning_rate=0.1, weight_decay=0.0, momentum=0.5)
    optimizer = Optimizer(cfg)
    params = ParamStore({"w": [0.0]})
    grads = ParamStore({"w": [1.0]})
    params = optimizer.step(params, grads)
    params = optimizer.step(params, grads)
    assert params["w"][0] == pytest.approx(-0.1 - 0.15, abs=1e-15)
    assert optimizer.state.step == 2


@pytest.mark.parametrize("name", list(OptimizerName))
def test_optimizer_trajectories_are_deterministic(name):
    cfg = OptimizerConfig(name=name, learning_rate=0.05)

    def trajectory():
        rng = derive_rng(11, "trajectory")
        params = ParamStore({"a": rng.normal(size=(3, 3)), "b": rng.normal(size=(3,))})
        optimizer = Optimizer(cfg, {"a": 10.0})
        for _ in range(5):
            grads = ParamStore({k: rng.normal(size=v.shape) for k, v in params.items()})
            params = optimizer.step(params, grads)
        return params

    assert trajectory().bit_equal(trajectory())


def test_param_store_rejects_non_finite():
    with pytest.raises(NumericError):
        ParamStore({"w": [1.0, np.inf]})


def test_param_store_merge_checks_shapes():
    store = ParamStore({"w": np.ones((2, 2))})
    with pytest.raises(ShapeError):
        store.merged({"w": np.ones(3)})
    assert store.merged({"v": np.ones(3)}).shapes == {"v": (3,), "w": (2, 2)}


def test_param_store_prefix_views():
    store = ParamStore({"f_a/x": [1.0], "f_o/W": [2.0], "protos/C": [3.0]})
    assert list(store.select(["f_a/", "f_o/"])) == ["f_a/x", "f_o/W"]
    assert list(store.exclude(["f_"])) == ["protos/C"]
    assert store.groups() == {"f_a": 1, "f_o": 1, "protos": 1}


def test_derived_streams():
    assert np.array_equal(derive_rng(3, "backbone").random(4), derive_rng(3, "backbone").random(4))
    assert not np.array_equal(derive_rng(3, "backbone").random(4), derive_rng(3, "head").random(4))
    assert not np.array_equal(derive_rng(3, "backbone").random(4), derive_rng(4, "backbone").random(4))


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    rng = derive_rng(0, "checkpoint")
    params = ParamStore({"f_a/stack/layer0/W": rng.normal(size=(3, 4)), "protos/C": rng.normal(size=(2, 4))})
    state = OptimizerState(step=7, slots={"protos/C/velocity": rng.normal(size=(2, 4))})
    stream = derive_rng(0, "pretrain")
    stream.random(3)
    path = save_checkpoint(tmp_path / "ckpt.npz", Checkpoint(
        params=params, meta={"config_hash": "abc", "steps": 7}, optimizer_state=state, rng_state=rng_state(stream),
    ))

    loaded = load_checkpoint(path)
    assert loaded.params.bit_equal(params)
    assert loaded.config_hash == "abc"
    assert loaded.meta["steps"] == 7
    assert loaded.optimizer_state.step == 7
    assert loaded.optimizer_state.slots["protos/C/velocity"].tobytes() == state.slots["protos/C/velocity"].tobytes()
    assert np.array_equal(restore_rng(loaded.rng_state).random(5), stream.random(5))


def test_checkpoint_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.npz")


def test_checkpoint_rejects_foreign_archive(tmp_path):
    path = tmp_path / "foreign.npz"
    np.savez(path, weights=np.ones(3))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_rejects_reserved_names(tmp_path):
    with pytest.raises(CheckpointError):
        save_checkpoint(tmp_path / "bad.npz", Checkpoint(params=ParamStore({"__meta__": [1.0]})))
