"""
Deterministic first-order optimizers with per-group learning-rate divisors.

Every family applies the same rule for the effective rate of a tensor:
alpha / divisor, where divisor is eta for names under a backbone prefix and
1 otherwise. Weight decay is an L2 term added to the gradient.
"""

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional

import numpy as np

from csst.core.errors import NumericError
from csst.numerics.params import ParamStore
from csst.schemas.config import OptimizerConfig, OptimizerName


def divisor_for(name: str, group_divisors: Optional[Mapping[str, float]]) -> float:
    """Longest matching prefix wins; names with no match use 1."""
    if not group_divisors:
        return 1.0
    best, best_len = 1.0, -1
    for prefix, divisor in group_divisors.items():
        if name.startswith(prefix) and len(prefix) > best_len:
            best, best_len = float(divisor), len(prefix)
    return best


def _check_finite(grads: ParamStore) -> None:
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}", detail={"param": name})


def _decayed(t: np.ndarray, g: np.ndarray, weight_decay: float) -> np.ndarray:
    return g + weight_decay * t if weight_decay else g


def sgd_step(params: ParamStore, grads: ParamStore, cfg: OptimizerConfig,
             group_divisors: Optional[Mapping[str, float]] = None) -> ParamStore:
    """t <- t - (alpha / divisor) * (g + weight_decay * t) for every tensor."""
    params.check_aligned(grads)
    _check_finite(grads)
    updated: Dict[str, np.ndarray] = {}
    for name, t in params.items():
        rate = cfg.learning_rate / divisor_for(name, group_divisors)
        updated[name] = t - rate * _decayed(t, grads[name], cfg.weight_decay)
    return ParamStore(updated)


@dataclass
class OptimizerState:
    """Per-tensor slots of stateful optimizers (momentum buffer, Adam moments)."""

    step: int = 0
    slots: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {f"__opt__/{k}": v for k, v in self.slots.items()}

    @classmethod
    def from_arrays(cls, step: int, arrays: Mapping[str, np.ndarray]) -> "OptimizerState":
        slots = {k[len("__opt__/"):]: np.asarray(v) for k, v in arrays.items() if k.startswith("__opt__/")}
        return cls(step=step, slots=slots)


class Optimizer:
    """Stateful wrapper dispatching on the configured family."""

    def __init__(self, cfg: OptimizerConfig, group_divisors: Optional[Mapping[str, float]] = None,
                 state: Optional[OptimizerState] = None):
        self.cfg = cfg
        self.group_divisors = dict(group_divisors or {})
        self.state = state or OptimizerState()

    def step(self, params: ParamStore, grads: ParamStore) -> ParamStore:
        self.state.step += 1
        if self.cfg.name == OptimizerName.SGD:
            return sgd_step(params, grads, self.cfg, self.group_divisors)
        params.check_aligned(grads)
        _check_finite(grads)
        if self.cfg.name == OptimizerName.MOMENTUM:
            return self._momentum(params, grads)
        return self._adam(params, grads)

    def _momentum(self, params: ParamStore, grads: ParamStore) -> ParamStore:
        updated = {}
        for name, t in params.items():
            g = _decayed(t, grads[name], self.cfg.weight_decay)
            buf = self.state.slots.get(f"{name}/velocity")
            buf = g.copy() if buf is None else self.cfg.momentum * buf + g
            self.state.slots[f"{name}/velocity"] = buf
            updated[name] = t - (self.cfg.learning_rate / divisor_for(name, self.group_divisors)) * buf
        return ParamStore(updated)

    def _adam(self, params: ParamStore, grads: ParamStore) -> ParamStore:
        cfg, k = self.cfg, self.state.step
        updated = {}
        for name, t in params.items():
            g = _decayed(t, grads[name], cfg.weight_decay)
            m = cfg.beta1 * self.state.slots.get(f"{name}/m", np.zeros_like(t)) + (1 - cfg.beta1) * g
            v = cfg.beta2 * self.state.slots.get(f"{name}/v", np.zeros_like(t)) + (1 - cfg.beta2) * g * g
            self.state.slots[f"{name}/m"], self.state.slots[f"{name}/v"] = m, v
            m_hat = m / (1 - cfg.beta1 ** k)
            v_hat = v / (1 - cfg.beta2 ** k)
            rate = cfg.learning_rate / divisor_for(name, self.group_divisors)
            updated[name] = t - rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        return ParamStore(updated)
