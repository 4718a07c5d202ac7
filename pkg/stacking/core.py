"""
Stackcast Core Types
Panel, task and quantile-forecast types plus dataset hygiene shared by every module
"""

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple
import logging

import numpy as np
import pandas as pd

from stacking.errors import (
    DuplicateItemId,
    EmptyAfterFilter,
    EmptySeries,
    InvalidTask,
    NonFiniteValue,
    ShapeMismatch,
)

logger = logging.getLogger(__name__)

EVAL_LOSSES = ("SQL", "MASE")
MIN_LENGTH_FACTOR = 8


def _frozen_array(values, ndim: int) -> np.ndarray:
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim != ndim:
        raise ShapeMismatch(f"Expected a {ndim}-d array, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class TimeSeries:
    """One regularly sampled univariate series; timestamps are start + k * step"""
    item_id: str
    values: np.ndarray
    start_time: pd.Timestamp = pd.Timestamp("2000-01-01")
    step: pd.Timedelta = pd.Timedelta(days=1)

    def __post_init__(self):
        object.__setattr__(self, 'values', _frozen_array(self.values, 1))
        object.__setattr__(self, 'start_time', pd.Timestamp(self.start_time))
        object.__setattr__(self, 'step', pd.Timedelta(self.step))

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def head(self, n: int) -> 'TimeSeries':
        """Prefix y_{1:n} with the same start and step"""
        return TimeSeries(self.item_id, self.values[:n], self.start_time, self.step)

    def timestamps(self) -> pd.DatetimeIndex:
        return pd.date_range(self.start_time, periods=len(self), freq=self.step)

    def to_dict(self) -> Dict:
        return {
            'item_id': self.item_id,
            'start_time': self.start_time.isoformat(),
            'step': str(self.step),
            'length': len(self)
        }


@dataclass(frozen=True, eq=False)
class TimeSeriesPanel:
    """Dataset D: a collection of series sharing seasonality m"""
    series: Tuple[TimeSeries, ...]
    seasonality_m: int = 1
    freq_label: str = ""
    name: str = "dataset"

    def __post_init__(self):
        object.__setattr__(self, 'series', tuple(self.series))
        if int(self.seasonality_m) < 1:
            raise InvalidTask(f"Seasonality must be >= 1, got {self.seasonality_m}")
        object.__setattr__(self, 'seasonality_m', int(self.seasonality_m))

    def __len__(self) -> int:
        return len(self.series)

    def __iter__(self) -> Iterator[TimeSeries]:
        return iter(self.series)

    @property
    def item_ids(self) -> List[str]:
        return [s.item_id for s in self.series]

    def get(self, item_id: str) -> TimeSeries:
        for s in self.series:
            if s.item_id == item_id:
                return s
        raise KeyError(item_id)

    def with_series(self, series: Sequence[TimeSeries]) -> 'TimeSeriesPanel':
        return TimeSeriesPanel(tuple(series), self.seasonality_m, self.freq_label, self.name)

    def lengths(self) -> Dict[str, int]:
        return {s.item_id: len(s) for s in self.series}


@dataclass(frozen=True)
class ForecastTask:
    """Horizon H, quantile levels Q and the evaluation/training loss"""
    horizon: int
    quantile_levels: Tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    eval_loss: str = "SQL"

    def __post_init__(self):
        levels = tuple(float(q) for q in self.quantile_levels)
        object.__setattr__(self, 'quantile_levels', levels)
        object.__setattr__(self, 'eval_loss', str(self.eval_loss).upper())

        if int(self.horizon) < 1:
            raise InvalidTask(f"Horizon must be >= 1, got {self.horizon}")
        if not levels:
            raise InvalidTask("At least one quantile level is required")
        if any(not (0.0 < q < 1.0) for q in levels):
            raise InvalidTask(f"Quantile levels must lie in (0, 1): {levels}")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise InvalidTask(f"Quantile levels must be strictly increasing: {levels}")
        if self.eval_loss not in EVAL_LOSSES:
            raise InvalidTask(f"Unknown eval loss '{self.eval_loss}' (expected one of {EVAL_LOSSES})")
        if self.eval_loss == "MASE" and self.median_index is None:
            raise InvalidTask("MASE tasks need the 0.5 quantile level")

    @property
    def n_quantiles(self) -> int:
        return len(self.quantile_levels)

    @property
    def median_index(self) -> Optional[int]:
        for idx, q in enumerate(self.quantile_levels):
            if abs(q - 0.5) < 1e-12:
                return idx
        return None

    @property
    def point_index(self) -> int:
        """Quantile column used as the point forecast (median, else the central level)"""
        idx = self.median_index
        return idx if idx is not None else self.n_quantiles // 2

    def to_dict(self) -> Dict:
        return {
            'horizon': self.horizon,
            'quantile_levels': list(self.quantile_levels),
            'eval_loss': self.eval_loss
        }


@dataclass(frozen=True, eq=False)
class QuantileForecast:
    """H x Q grid of quantile predictions for one item issued at origin_t"""
    item_id: str
    origin_t: int
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'values', _frozen_array(self.values, 2))
        object.__setattr__(self, 'origin_t', int(self.origin_t))

    @property
    def horizon(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_quantiles(self) -> int:
        return int(self.values.shape[1])

    def check_shape(self, horizon: int, n_quantiles: int):
        if self.values.shape != (horizon, n_quantiles):
            raise ShapeMismatch(
                f"Forecast for '{self.item_id}' has shape {self.values.shape}, "
                f"expected {(horizon, n_quantiles)}"
            )


@dataclass(frozen=True, eq=False)
class ModelForecastSet:
    """Forecasts of M models over a common item set, model order fixed"""
    model_ids: Tuple[str, ...]
    forecasts: Mapping[str, Mapping[str, QuantileForecast]] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'model_ids', tuple(self.model_ids))
        if len(set(self.model_ids)) != len(self.model_ids):
            raise ShapeMismatch(f"Duplicate model ids: {self.model_ids}")
        missing = [m for m in self.model_ids if m not in self.forecasts]
        if missing:
            raise ShapeMismatch(f"No forecasts for models {missing}")
        if not self.model_ids:
            return

        reference = self.forecasts[self.model_ids[0]]
        for model_id in self.model_ids[1:]:
            current = self.forecasts[model_id]
            if set(current) != set(reference):
                raise ShapeMismatch(f"Model '{model_id}' covers a different item set")
            for item_id, fc in current.items():
                ref = reference[item_id]
                if fc.origin_t != ref.origin_t or fc.values.shape != ref.values.shape:
                    raise ShapeMismatch(
                        f"Model '{model_id}' disagrees on origin/shape for item '{item_id}'"
                    )

    @property
    def item_ids(self) -> List[str]:
        if not self.model_ids:
            return []
        return list(self.forecasts[self.model_ids[0]].keys())

    @property
    def shape(self) -> Tuple[int, int]:
        """(H, Q) shared by every forecast"""
        first = next(iter(self.forecasts[self.model_ids[0]].values()))
        return first.values.shape

    def origin(self, item_id: str) -> int:
        return self.forecasts[self.model_ids[0]][item_id].origin_t

    def to_array(self,
                 item_ids: Optional[Sequence[str]] = None,
                 model_ids: Optional[Sequence[str]] = None) -> np.ndarray:
        """Stack forecasts into an (N, M, H, Q) array"""
        item_ids = list(item_ids) if item_ids is not None else self.item_ids
        model_ids = list(model_ids) if model_ids is not None else list(self.model_ids)
        unknown = [m for m in model_ids if m not in self.forecasts]
        if unknown:
            raise ShapeMismatch(f"Forecast set has no models {unknown}")
        return np.stack([
            np.stack([self.forecasts[m][item_id].values for m in model_ids])
            for item_id in item_ids
        ])

    @classmethod
    def from_array(cls,
                   model_ids: Sequence[str],
                   item_ids: Sequence[str],
                   origins: Sequence[int],
                   array: np.ndarray) -> 'ModelForecastSet':
        """Inverse of to_array for an (N, M, H, Q) array"""
        forecasts = {
            m: {
                item_id: QuantileForecast(item_id, origins[n], array[n, j])
                for n, item_id in enumerate(item_ids)
            }
            for j, m in enumerate(model_ids)
        }
        return cls(tuple(model_ids), forecasts)

    def merge(self, other: 'ModelForecastSet') -> 'ModelForecastSet':
        """Union of two forecast sets over the same items (model order: self, then other)"""
        overlap = set(self.model_ids) & set(other.model_ids)
        if overlap:
            raise ShapeMismatch(f"Models present in both forecast sets: {sorted(overlap)}")
        forecasts = dict(self.forecasts)
        forecasts.update(other.forecasts)
        return ModelForecastSet(self.model_ids + other.model_ids, forecasts)


def validate_panel(panel: TimeSeriesPanel) -> TimeSeriesPanel:
    """
    Check every series invariant; returns the panel unchanged

    Raises:
        EmptySeries, NonFiniteValue, DuplicateItemId
    """
    seen = set()
    for series in panel.series:
        if series.item_id in seen:
            raise DuplicateItemId(series.item_id)
        seen.add(series.item_id)

        if len(series) == 0:
            raise EmptySeries(series.item_id)

        bad = np.flatnonzero(~np.isfinite(series.values))
        if bad.size:
            raise NonFiniteValue(series.item_id, int(bad[0]))

    logger.debug(f"Validated panel '{panel.name}' with {len(panel)} series")
    return panel


def filter_min_length(panel: TimeSeriesPanel,
                      horizon: int,
                      factor: int = MIN_LENGTH_FACTOR) -> TimeSeriesPanel:
    """Keep the series with at least factor * H observations, order preserved"""
    if horizon < 1:
        raise InvalidTask(f"Horizon must be >= 1, got {horizon}")

    min_length = factor * horizon
    kept = [s for s in panel.series if len(s) >= min_length]
    dropped = len(panel) - len(kept)

    if not kept:
        raise EmptyAfterFilter(min_length)
    if dropped:
        logger.info(f"Dropped {dropped} of {len(panel)} series shorter than {min_length}")

    return panel.with_series(kept)


def sort_quantiles(values: np.ndarray) -> np.ndarray:
    """Monotone rearrangement along the last (quantile) axis"""
    return np.sort(values, axis=-1)


def enforce_quantile_monotonicity(forecast: QuantileForecast) -> QuantileForecast:
    """Sort each horizon row so quantiles never cross"""
    values = forecast.values
    if values.shape[1] < 2 or np.all(np.diff(values, axis=1) >= 0):
        return forecast
    return QuantileForecast(forecast.item_id, forecast.origin_t, sort_quantiles(values))
