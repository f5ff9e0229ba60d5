"""Forecast error metrics and the historical-average baseline."""
from __future__ import annotations

import numpy as np

from .errors import DataError, ShapeError

MAPE_ZERO_CUTOFF = 1e-6
MINUTES_PER_DAY = 1440


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.size == 0:
        raise DataError("cannot score empty arrays")
    return pred, truth


def mae(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def rmse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def mape(pred, truth) -> float:
    """Mean absolute percentage error; near-zero truths are skipped."""
    pred, truth = _pair(pred, truth)
    keep = np.abs(truth) >= MAPE_ZERO_CUTOFF
    if not keep.any():
        raise DataError("every truth value is ~0; MAPE undefined")
    return float(np.mean(np.abs(pred[keep] - truth[keep]) / np.abs(truth[keep])) * 100.0)


def all_metrics(pred, truth) -> dict[str, float]:
    return {"mae": mae(pred, truth), "mape": mape(pred, truth), "rmse": rmse(pred, truth)}


def per_node_metrics(pred, truth) -> list[dict[str, float]]:
    """Metrics per node for arrays shaped (windows, nodes, steps)."""
    pred, truth = _pair(pred, truth)
    rows = []
    for n in range(pred.shape[1]):
        p, t = pred[:, n], truth[:, n]
        row = {"mae": mae(p, t), "rmse": rmse(p, t)}
        try:
            row["mape"] = mape(p, t)
        except DataError:
            row["mape"] = float("nan")
        rows.append(row)
    return rows


def slots_per_day(sampling_interval_minutes: float) -> int | None:
    """Steps per day, or ``None`` when the interval does not divide a day."""
    steps = MINUTES_PER_DAY / sampling_interval_minutes
    if steps < 1 or abs(steps - round(steps)) > 1e-9:
        return None
    return int(round(steps))


def historical_average_baseline(
    train_values: np.ndarray,
    train_start: int,
    target_starts: np.ndarray,
    horizon: int,
    sampling_interval_minutes: float,
) -> np.ndarray:
    """Time-of-day averages of the training block as a forecast.

    ``train_values`` is N x T_train beginning at absolute step ``train_start``
    (step 0 is taken as midnight).  ``target_starts`` are the absolute indices
    of each window's first target step.  Returns (windows, N, horizon).
    Slots never seen in training, or an interval that does not divide a day,
    fall back to the per-node training mean.
    """
    train_values = np.asarray(train_values, dtype=np.float64)
    n_nodes, n_train = train_values.shape
    overall = train_values.mean(axis=1)
    target_idx = np.asarray(target_starts)[:, None] + np.arange(horizon)[None, :]
    period = slots_per_day(sampling_interval_minutes)
    if period is None:
        return np.broadcast_to(overall[None, :, None], (len(target_starts), n_nodes, horizon)).copy()
    slot_of_train = (train_start + np.arange(n_train)) % period
    sums = np.zeros((n_nodes, period))
    counts = np.zeros(period)
    np.add.at(sums.T, slot_of_train, train_values.T)
    np.add.at(counts, slot_of_train, 1.0)
    table = np.where(counts > 0, sums / np.maximum(counts, 1.0), overall[:, None])
    return np.moveaxis(table[:, target_idx % period], 0, 1)
