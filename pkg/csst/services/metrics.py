"""
Error metrics on original-scale flows.
"""

from typing import Dict

import numpy as np

from csst.core.errors import DataError


def _pair(y, y_hat):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    y_hat = np.asarray(y_hat, dtype=np.float64).reshape(-1)
    if y.shape != y_hat.shape:
        raise DataError(f"label/prediction length mismatch: {y.size} vs {y_hat.size}")
    if y.size == 0:
        raise DataError("no instances to score")
    return y, y_hat


def relative_errors(y, y_hat) -> np.ndarray:
    """|y - ŷ| / y per instance; every label must be positive."""
    y, y_hat = _pair(y, y_hat)
    if np.any(y <= 0):
        raise DataError("relative error undefined for zero labels; exclude them first",
                        detail={"zero_labels": int(np.sum(y <= 0))})
    return np.abs(y - y_hat) / y


def mape(y, y_hat) -> float:
    return float(np.mean(relative_errors(y, y_hat)))


def acc(errors, epsilon: float = 0.3) -> float:
    """Share of instances whose error is strictly below epsilon."""
    errors = np.asarray(errors, dtype=np.float64).reshape(-1)
    if errors.size == 0:
        raise DataError("acc of an empty error list")
    if np.any(errors < 0):
        raise DataError("errors must be non-negative")
    return float(np.mean(errors < epsilon))


def score(y, y_hat, epsilon: float = 0.3) -> Dict[str, float]:
    """MAPE and ACC over the positive-label instances; zero labels are counted and skipped."""
    y, y_hat = _pair(y, y_hat)
    keep = y > 0
    if not keep.any():
        raise DataError("every label in the split is zero")
    errors = relative_errors(y[keep], y_hat[keep])
    return {
        "mape": float(np.mean(errors)),
        "acc": acc(errors, epsilon),
        "n": int(keep.sum()),
        "excluded_zero_labels": int((~keep).sum()),
    }
