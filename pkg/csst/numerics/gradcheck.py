"""
Central finite-difference gradient checker.
"""

from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from csst.core.config.settings import settings
from csst.numerics.autodiff import Tape, Var
from csst.numerics.params import ParamStore

LossFn = Callable[[Tape, Dict[str, Var]], Var]


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: Optional[str]
    n_checked: int
    n_kinks: int = 0

    def ok(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error <= tolerance


def evaluate(fn: LossFn, params: ParamStore) -> float:
    tape = Tape()
    return float(fn(tape, tape.watch(params)).value)


def analytic_gradient(fn: LossFn, params: ParamStore) -> ParamStore:
    tape = Tape()
    leaves = tape.watch(params)
    return tape.gradient(fn(tape, leaves), leaves)


def gradcheck(fn: LossFn, params: ParamStore, step: Optional[float] = None,
              max_entries_per_param: Optional[int] = None, floor: float = 1e-6,
              rng: Optional[np.random.Generator] = None,
              kink_tolerance: Optional[float] = None) -> GradCheckResult:
    """Compare tape gradients against (f(x+h) - f(x-h)) / 2h entry by entry.

    Relative error is |a - n| / max(|a|, |n|, floor); entries may be subsampled
    per tensor with `max_entries_per_param`. With `kink_tolerance` set, entries
    whose stencil straddles a ReLU kink are counted in `n_kinks` and skipped:
    a kink inside [x-h, x+h] biases the central difference by
    |f(x+h) - 2f(x) + f(x-h)| / 2h, which is flagged once it exceeds
    `kink_tolerance` relative to the gradient.
    """
    h = step if step is not None else settings.fd_step
    analytic = analytic_gradient(fn, params)
    f_center = evaluate(fn, params) if kink_tolerance is not None else 0.0
    worst, worst_name, checked, kinks = 0.0, None, 0, 0
    for name, value in params.items():
        flat = value.reshape(-1)
        positions = np.arange(flat.size)
        if max_entries_per_param is not None and flat.size > max_entries_per_param:
            chooser = rng or np.random.default_rng(0)
            positions = np.sort(chooser.choice(flat.size, size=max_entries_per_param, replace=False))
        for pos in positions:
            plus, minus = flat.copy(), flat.copy()
            plus[pos] += h
            minus[pos] -= h
            f_plus = evaluate(fn, params.replace(name, plus.reshape(value.shape)))
            f_minus = evaluate(fn, params.replace(name, minus.reshape(value.shape)))
            numeric = (f_plus - f_minus) / (2.0 * h)
            exact = float(analytic[name].reshape(-1)[pos])
            scale = max(abs(exact), abs(numeric), floor)
            if kink_tolerance is not None:
                bias = abs(f_plus - 2.0 * f_center + f_minus) / (2.0 * h)
                if bias > kink_tolerance * scale:
                    kinks += 1
                    continue
            rel = abs(exact - numeric) / scale
            checked += 1
            if rel > worst:
                worst, worst_name = rel, name
    return GradCheckResult(max_rel_error=worst, worst_param=worst_name, n_checked=checked, n_kinks=kinks)
