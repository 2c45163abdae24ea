"""Regression evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EvalMetrics:
    """MSE, RMSE (= sqrt MSE), MAE, and coefficient of determination.

    r2 is NaN when the targets have zero variance; there is no variance to
    explain, so the ratio is undefined rather than silently 0 or 1.
    """

    mse: float
    rmse: float
    mae: float
    r2: float

    @property
    def r2_defined(self) -> bool:
        return not math.isnan(self.r2)


def evaluate(y_true, y_pred) -> EvalMetrics:
    """Aggregate error metrics over all elements of equal-shape arrays."""
    yt = np.asarray(y_true, dtype=np.float64)
    yp = np.asarray(y_pred, dtype=np.float64)
    if yt.shape != yp.shape:
        raise ValueError(f"shape mismatch: {yt.shape} vs {yp.shape}")
    if yt.size < 2:
        raise ValueError("need at least 2 values to evaluate")
    err = yt - yp
    mse = float(np.mean(err**2))
    mae = float(np.mean(np.abs(err)))
    ss_res = float(np.sum(err**2))
    ss_tot = float(np.sum((yt - yt.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan")
    return EvalMetrics(mse=mse, rmse=math.sqrt(mse), mae=mae, r2=r2)
