"""
Stackcast Losses
Pinball loss, scaled quantile loss (SQL), MASE and dataset-level averaging
"""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Sequence, Tuple
import logging

import numpy as np

from stacking.core import ForecastTask, QuantileForecast
from stacking.errors import AllItemsExcluded, SeriesTooShort, ShapeMismatch, ZeroScale

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ItemScore:
    """Per-item loss; excluded items (a_i = 0) carry no value"""
    item_id: str
    value: float
    excluded: bool = False

    def to_dict(self) -> Dict:
        return {'item_id': self.item_id, 'value': self.value, 'excluded': self.excluded}


@dataclass(frozen=True)
class SeasonalScale:
    """Historic absolute seasonal error a_i"""
    item_id: str
    a: float


@dataclass(frozen=True)
class DatasetScore:
    """Mean loss over non-excluded items"""
    value: float
    n_items: int
    n_excluded: int


def pinball(y_hat, y, q):
    """
    Quantile loss with the factor 2, in its non-negative form:
    2 q (y - y_hat) if y >= y_hat, else 2 (1 - q) (y_hat - y)
    """
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    diff = y - y_hat
    loss = 2.0 * np.where(diff >= 0, q * diff, (q - 1.0) * diff)
    return float(loss) if loss.ndim == 0 else loss


def pinball_grad(y_hat, y, q):
    """Subgradient of pinball w.r.t. y_hat, 0 at the kink"""
    y_hat = np.asarray(y_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return np.where(y > y_hat, -2.0 * q, np.where(y < y_hat, 2.0 * (1.0 - q), 0.0))


def seasonal_error(values: Sequence[float], m: int, item_id: str = "") -> SeasonalScale:
    """a = mean |y_t - y_{t-m}| over t = m+1..T"""
    y = np.asarray(values, dtype=np.float64)
    if y.shape[0] <= m:
        raise SeriesTooShort(int(y.shape[0]), m)
    return SeasonalScale(item_id, float(np.mean(np.abs(y[m:] - y[:-m]))))


def sql_item(forecast: QuantileForecast,
             actual: Sequence[float],
             scale: SeasonalScale,
             quantile_levels: Sequence[float]) -> ItemScore:
    """Mean pinball over (h, q) divided by a_i"""
    actual = np.asarray(actual, dtype=np.float64)
    levels = np.asarray(quantile_levels, dtype=np.float64)
    values = forecast.values
    if values.shape != (actual.shape[0], levels.shape[0]):
        raise ShapeMismatch(
            f"Forecast shape {values.shape} does not match H={actual.shape[0]}, Q={levels.shape[0]}"
        )
    if scale.a <= 0:
        raise ZeroScale(forecast.item_id)

    losses = pinball(values, actual[:, None], levels[None, :])
    return ItemScore(forecast.item_id, float(np.mean(losses) / scale.a))


def mase_item(point: Sequence[float],
              actual: Sequence[float],
              scale: SeasonalScale,
              item_id: str = "") -> ItemScore:
    """Mean absolute error divided by a_i"""
    point = np.asarray(point, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if point.shape != actual.shape:
        raise ShapeMismatch(f"Point forecast shape {point.shape} != actual shape {actual.shape}")
    if scale.a <= 0:
        raise ZeroScale(item_id or scale.item_id)
    return ItemScore(item_id or scale.item_id, float(np.mean(np.abs(point - actual)) / scale.a))


def score_item(forecast: QuantileForecast,
               actual: Sequence[float],
               scale: SeasonalScale,
               task: ForecastTask) -> ItemScore:
    """Task loss for one item; zero-scale items come back excluded instead of raising"""
    if scale.a <= 0:
        return ItemScore(forecast.item_id, float('nan'), excluded=True)
    if task.eval_loss == "MASE":
        return mase_item(forecast.values[:, task.point_index], actual, scale, forecast.item_id)
    return sql_item(forecast, actual, scale, task.quantile_levels)


def dataset_loss(scores: Iterable[ItemScore]) -> DatasetScore:
    """Arithmetic mean over non-excluded items"""
    scores = list(scores)
    kept = [s.value for s in scores if not s.excluded]
    n_excluded = len(scores) - len(kept)

    if not kept:
        raise AllItemsExcluded(len(scores))
    if n_excluded:
        logger.warning(f"Excluded {n_excluded} of {len(scores)} items with zero seasonal scale")

    return DatasetScore(float(np.mean(kept)), len(scores), n_excluded)


def batch_loss_and_grad(predictions: np.ndarray,
                        targets: np.ndarray,
                        scales: np.ndarray,
                        task: ForecastTask) -> Tuple[float, np.ndarray]:
    """
    Dataset loss of stacked windows and its gradient w.r.t. the predictions

    Args:
        predictions: (R, H, Q) quantile forecasts, one row per (fold, item) window
        targets: (R, H) ground truth
        scales: (R,) seasonal scales; rows with a = 0 are excluded
        task: selects SQL (all levels) or MASE (point column)

    Returns:
        (mean loss over non-excluded rows, gradient of shape (R, H, Q))
    """
    scales = np.asarray(scales, dtype=np.float64)
    active = scales > 0
    n_active = int(active.sum())
    if n_active == 0:
        raise AllItemsExcluded(int(scales.shape[0]))

    row_weight = np.where(active, 1.0 / np.where(active, scales, 1.0), 0.0) / n_active
    grad = np.zeros_like(predictions)
    n_steps = predictions.shape[1]

    if task.eval_loss == "MASE":
        col = task.point_index
        err = predictions[:, :, col] - targets
        loss = float(np.sum(np.abs(err).mean(axis=1) * row_weight))
        grad[:, :, col] = np.sign(err) * row_weight[:, None] / n_steps
        return loss, grad

    levels = np.asarray(task.quantile_levels, dtype=np.float64)[None, None, :]
    y = targets[:, :, None]
    per_row = pinball(predictions, y, levels).mean(axis=(1, 2))
    loss = float(np.sum(per_row * row_weight))
    grad = pinball_grad(predictions, y, levels) * row_weight[:, None, None] / (n_steps * levels.size)
    return loss, grad


def batch_loss(predictions: np.ndarray,
               targets: np.ndarray,
               scales: np.ndarray,
               task: ForecastTask) -> float:
    return batch_loss_and_grad(predictions, targets, scales, task)[0]


def batch_item_losses(predictions: np.ndarray,
                      targets: np.ndarray,
                      scales: np.ndarray,
                      task: ForecastTask,
                      row_items: Sequence[str]) -> List[ItemScore]:
    """Per-row ItemScores for stacked windows"""
    scores = []
    for r, item_id in enumerate(row_items):
        fc = QuantileForecast(item_id, 0, predictions[r])
        scores.append(score_item(fc, targets[r], SeasonalScale(item_id, float(scales[r])), task))
    return scores
