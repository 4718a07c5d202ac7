"""
Stackcast Base Learners
Local L1 forecasters (seasonal naive, SES, Theta, ridge AR) and the external-forecast import hook
"""

from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union
import logging

import numpy as np
import pandas as pd

from stacking.core import ForecastTask, ModelForecastSet, QuantileForecast, TimeSeries, enforce_quantile_monotonicity
from stacking.errors import ExternalFileMissing, InsufficientHistory, SchemaMismatch, ShapeMismatch

logger = logging.getLogger(__name__)

DEFAULT_ALPHA_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))
SEASONALITY_ACF_THRESHOLD = 0.5
FORECAST_COLUMNS = ['item_id', 'fold', 'model', 'origin_t', 'h', 'q', 'value']


class LearnerKind(str, Enum):
    SEASONAL_NAIVE = "SeasonalNaive"
    SES = "SES"
    THETA = "Theta"
    LINEAR_AR = "LinearAR"
    EXTERNAL = "External"


@dataclass(frozen=True)
class BaseLearnerSpec:
    """Model family plus its settings; name defaults to the kind"""
    kind: LearnerKind
    params: Mapping[str, Any] = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, 'kind', LearnerKind(self.kind))
        params = dict(self.params or {})

        if self.kind in (LearnerKind.SES, LearnerKind.THETA):
            grid = tuple(sorted(float(a) for a in params.get('alpha_grid', DEFAULT_ALPHA_GRID)))
            if not grid or any(not (0.0 < a <= 1.0) for a in grid):
                raise ValueError(f"{self.kind.value}: alpha grid must be non-empty within (0, 1]")
            params['alpha_grid'] = grid
        elif self.kind == LearnerKind.LINEAR_AR:
            if params.get('p') is not None and int(params['p']) < 1:
                raise ValueError(f"LinearAR: p must be >= 1, got {params['p']}")
            params.setdefault('ridge', 1e-3)
            if float(params['ridge']) <= 0:
                raise ValueError(f"LinearAR: ridge lambda must be positive, got {params['ridge']}")
        elif self.kind == LearnerKind.EXTERNAL and not params.get('path'):
            raise ValueError("External learner needs a 'path' parameter")

        object.__setattr__(self, 'params', params)

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.kind == LearnerKind.EXTERNAL:
            return str(self.params.get('model', 'External'))
        return self.kind.value

    @classmethod
    def from_config(cls, entry: Union[str, Mapping]) -> 'BaseLearnerSpec':
        """Accepts 'SES' or {'kind': 'LinearAR', 'params': {...}, 'name': ...}"""
        if isinstance(entry, str):
            return cls(LearnerKind(entry))
        return cls(LearnerKind(entry['kind']), entry.get('params') or {}, entry.get('name', ''))

    def to_dict(self) -> Dict:
        params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.params.items()}
        return {'kind': self.kind.value, 'name': self.name, 'params': params}


@dataclass(frozen=True)
class ResidualQuantilePolicy:
    """Quantile offsets from median-centred in-sample residual quantiles"""
    center: bool = True
    min_history: int = 3

    def __post_init__(self):
        if self.min_history < 1:
            raise ValueError(f"min_history must be >= 1, got {self.min_history}")

    def offsets(self, residuals: np.ndarray, quantile_levels: Sequence[float]) -> np.ndarray:
        levels = np.asarray(quantile_levels, dtype=np.float64)
        if residuals.shape[0] < self.min_history:
            return np.zeros_like(levels)
        offsets = np.quantile(residuals, levels)
        if self.center:
            offsets = offsets - np.median(residuals)
        return offsets


DEFAULT_POLICY = ResidualQuantilePolicy()


# Smoothing and trend helpers

def _ses_filter(y: np.ndarray, alpha: float) -> Tuple[np.ndarray, float]:
    """One-step fitted values for t = 1..T-1 and the final level"""
    fitted = np.empty(y.shape[0] - 1)
    level = y[0]
    for t in range(1, y.shape[0]):
        fitted[t - 1] = level
        level = alpha * y[t] + (1.0 - alpha) * level
    return fitted, float(level)


def _select_alpha(y: np.ndarray, grid: Sequence[float]) -> float:
    """Grid alpha with the smallest in-sample one-step MAE, ties to the smaller alpha"""
    maes = [np.mean(np.abs(y[1:] - _ses_filter(y, a)[0])) for a in grid]
    return float(grid[int(np.argmin(maes))])


def _linear_trend(y: np.ndarray) -> Tuple[float, float]:
    t = np.arange(y.shape[0], dtype=np.float64)
    slope, intercept = np.polyfit(t, y, 1)
    return float(intercept), float(slope)


def _detrended(y: np.ndarray) -> np.ndarray:
    intercept, slope = _linear_trend(y)
    return y - (intercept + slope * np.arange(y.shape[0]))


def _additive_indices(y: np.ndarray, m: int) -> np.ndarray:
    """Per-position means of the detrended series, normalized to sum to zero"""
    detrended = _detrended(y)
    positions = np.arange(y.shape[0]) % m
    indices = np.array([detrended[positions == k].mean() for k in range(m)])
    return indices - indices.mean()


def is_seasonal(y: np.ndarray, m: int) -> bool:
    """Detrended lag-m autocorrelation above the threshold"""
    if m <= 1 or y.shape[0] < 2 * m:
        return False
    centred = _detrended(y)
    centred = centred - centred.mean()
    denom = float(np.dot(centred, centred))
    if denom <= 1e-12:
        return False
    return float(np.dot(centred[m:], centred[:-m])) / denom > SEASONALITY_ACF_THRESHOLD


def _ridge_fit(y: np.ndarray, p: int, ridge: float) -> Tuple[float, np.ndarray]:
    """Ridge on p lags with an unpenalized intercept"""
    rows = y.shape[0] - p
    lags = np.column_stack([y[p - j - 1:p - j - 1 + rows] for j in range(p)])
    target = y[p:]
    x_mean = lags.mean(axis=0)
    y_mean = target.mean()
    xc = lags - x_mean
    coef = np.linalg.solve(xc.T @ xc + ridge * np.eye(p), xc.T @ (target - y_mean))
    return float(y_mean - x_mean @ coef), coef


def _ar_fitted(y: np.ndarray, intercept: float, coef: np.ndarray) -> np.ndarray:
    p = coef.shape[0]
    rows = y.shape[0] - p
    lags = np.column_stack([y[p - j - 1:p - j - 1 + rows] for j in range(p)])
    return intercept + lags @ coef


@dataclass
class FittedLearner:
    """
    A base learner with its learned parameters retained

    The parameters (alpha, seasonal switch, AR order and coefficients) are
    learned once on the fitting history and then applied to whatever context
    is passed to predict, so the last fold's fit can forecast the test window
    from the full training prefix.
    """
    spec: BaseLearnerSpec
    seasonality_m: int
    params: Dict[str, Any] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.spec.name

    def _require(self, y: np.ndarray, required: int):
        if y.shape[0] < required:
            raise InsufficientHistory(self.spec.kind.value, int(y.shape[0]), required)

    def min_history(self) -> int:
        kind = self.spec.kind
        if kind == LearnerKind.SEASONAL_NAIVE:
            return self.seasonality_m
        if kind == LearnerKind.LINEAR_AR:
            return int(self.params['p']) + 2
        if kind == LearnerKind.EXTERNAL:
            return 1
        return 3

    def path_and_residuals(self, y: np.ndarray, horizon: int) -> Tuple[np.ndarray, np.ndarray]:
        """(H-step point path, in-sample one-step residuals) on the context y"""
        self._require(y, self.min_history())
        kind = self.spec.kind
        n = y.shape[0]
        steps = np.arange(horizon)

        if kind == LearnerKind.SEASONAL_NAIVE:
            m = self.seasonality_m
            return y[n - m + steps % m], y[m:] - y[:-m]

        if kind == LearnerKind.SES:
            fitted, level = _ses_filter(y, self.params['alpha'])
            return np.full(horizon, level), y[1:] - fitted

        if kind == LearnerKind.THETA:
            m = self.seasonality_m
            t = np.arange(n)
            seasonal = _additive_indices(y, m) if self.params['seasonal'] and n >= m else None
            season_in = seasonal[t % m] if seasonal is not None else np.zeros(n)
            season_out = seasonal[(n + steps) % m] if seasonal is not None else np.zeros(horizon)

            adjusted = y - season_in
            intercept, slope = _linear_trend(adjusted)
            trend = intercept + slope * t
            fitted_dev, level_dev = _ses_filter(adjusted - trend, self.params['alpha'])

            path = intercept + slope * (n + steps) + level_dev + season_out
            fitted = trend[1:] + fitted_dev + season_in[1:]
            return path, y[1:] - fitted

        if kind == LearnerKind.LINEAR_AR:
            intercept = self.params['intercept']
            coef = np.asarray(self.params['coef'])
            p = coef.shape[0]
            extended = list(y[-p:])
            for _ in range(horizon):
                recent = np.asarray(extended[-p:][::-1])
                extended.append(intercept + float(recent @ coef))
            return np.asarray(extended[p:]), y[p:] - _ar_fitted(y, intercept, coef)

        raise ValueError(f"{kind.value} has no point path; it is read from file")

    def predict(self,
                history: TimeSeries,
                task: ForecastTask,
                policy: ResidualQuantilePolicy = DEFAULT_POLICY) -> QuantileForecast:
        """H x Q forecast issued at origin len(history)"""
        if self.spec.kind == LearnerKind.EXTERNAL:
            return _external_forecast(self.spec, history, task)

        path, residuals = self.path_and_residuals(history.values, task.horizon)
        offsets = policy.offsets(residuals, task.quantile_levels)
        values = path[:, None] + offsets[None, :]
        return enforce_quantile_monotonicity(QuantileForecast(history.item_id, len(history), values))

    def to_dict(self) -> Dict:
        params = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.params.items()}
        return {'spec': self.spec.to_dict(), 'seasonality_m': self.seasonality_m, 'params': params}


def fit_learner(spec: BaseLearnerSpec, history: TimeSeries, m: int) -> FittedLearner:
    """Learn the learner's parameters on history"""
    y = history.values
    learner = FittedLearner(spec, int(m))

    if spec.kind == LearnerKind.SEASONAL_NAIVE:
        learner._require(y, int(m))
    elif spec.kind == LearnerKind.SES:
        learner._require(y, 3)
        learner.params['alpha'] = _select_alpha(y, spec.params['alpha_grid'])
    elif spec.kind == LearnerKind.THETA:
        learner._require(y, 3)
        seasonal = is_seasonal(y, int(m))
        adjusted = y - _additive_indices(y, int(m))[np.arange(y.shape[0]) % m] if seasonal else y
        learner.params['seasonal'] = seasonal
        learner.params['alpha'] = _select_alpha(_detrended(adjusted), spec.params['alpha_grid'])
    elif spec.kind == LearnerKind.LINEAR_AR:
        p = spec.params.get('p')
        p = int(p) if p is not None else max(1, min(2 * int(m), y.shape[0] // 4))
        learner.params['p'] = p
        learner._require(y, p + 2)
        intercept, coef = _ridge_fit(y, p, float(spec.params['ridge']))
        learner.params['intercept'] = intercept
        learner.params['coef'] = coef

    return learner


def fit_predict(spec: BaseLearnerSpec,
                history: TimeSeries,
                m: int,
                task: ForecastTask,
                policy: ResidualQuantilePolicy = DEFAULT_POLICY) -> QuantileForecast:
    return fit_learner(spec, history, m).predict(history, task, policy)


def point_path(spec: BaseLearnerSpec, history: TimeSeries, m: int, horizon: int) -> np.ndarray:
    """Deterministic H-step point forecast"""
    learner = fit_learner(spec, history, m)
    if spec.kind == LearnerKind.EXTERNAL:
        task = ForecastTask(horizon, (0.5,))
        return learner.predict(history, task).values[:, 0]
    return learner.path_and_residuals(history.values, horizon)[0]


# External forecasts

@lru_cache(maxsize=16)
def _read_external(path: str, mtime: float) -> pd.DataFrame:
    from utils.storage import read_forecast_records
    return read_forecast_records(Path(path))


def load_external_records(path: Union[str, Path]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise ExternalFileMissing(path)
    return _read_external(str(path.resolve()), path.stat().st_mtime)


def _grid_from_records(records: pd.DataFrame, item_id: str, task: ForecastTask) -> np.ndarray:
    levels = np.asarray(task.quantile_levels)
    found = np.sort(records['q'].unique())
    if found.shape[0] != levels.shape[0] or not np.allclose(found, levels):
        raise ShapeMismatch(
            f"Item '{item_id}' has quantile levels {found.tolist()}, expected {levels.tolist()}"
        )
    grid = records.pivot_table(index='h', columns='q', values='value', aggfunc='first').sort_index()
    if list(grid.index) != list(range(1, task.horizon + 1)) or grid.isna().any().any():
        raise ShapeMismatch(f"Item '{item_id}' does not cover horizon steps 1..{task.horizon}")
    return grid.to_numpy(dtype=np.float64)


def _external_forecast(spec: BaseLearnerSpec, history: TimeSeries, task: ForecastTask) -> QuantileForecast:
    records = load_external_records(spec.params['path'])
    model = spec.params.get('model', spec.name)
    origin = len(history)
    rows = records[(records['model'] == model) & (records['item_id'] == history.item_id)
                   & (records['origin_t'] == origin)]
    if rows.empty:
        raise SchemaMismatch(f"No external '{model}' forecast at origin {origin} for items", [history.item_id])
    values = _grid_from_records(rows, history.item_id, task)
    return enforce_quantile_monotonicity(QuantileForecast(history.item_id, origin, values))


def import_external(path: Union[str, Path],
                    task: ForecastTask,
                    item_ids: Optional[Sequence[str]] = None,
                    origins: Optional[Mapping[str, int]] = None) -> ModelForecastSet:
    """
    Parse externally produced forecasts into a ModelForecastSet

    Args:
        path: file in the forecast record schema (item_id,fold,model,origin_t,h,q,value)
        task: expected horizon and quantile levels
        item_ids: items that must be covered; defaults to the items in the file
        origins: origin per item to select; defaults to each item's latest origin

    Raises:
        ExternalFileMissing, SchemaMismatch, ShapeMismatch
    """
    records = load_external_records(path)
    wanted = list(item_ids) if item_ids is not None else list(dict.fromkeys(records['item_id']))

    if origins is None:
        latest = records.groupby('item_id')['origin_t'].max()
        origins = {item: int(latest[item]) for item in wanted if item in latest.index}

    forecasts: Dict[str, Dict[str, QuantileForecast]] = {}
    for model in dict.fromkeys(records['model']):
        model_rows = records[records['model'] == model]
        missing: List[str] = []
        per_item: Dict[str, QuantileForecast] = {}
        for item in wanted:
            rows = model_rows[(model_rows['item_id'] == item) & (model_rows['origin_t'] == origins.get(item, -1))]
            if rows.empty:
                missing.append(item)
                continue
            values = _grid_from_records(rows, item, task)
            per_item[item] = enforce_quantile_monotonicity(QuantileForecast(item, origins[item], values))
        if missing:
            raise SchemaMismatch(f"External model '{model}' has no forecasts for items", missing)
        forecasts[str(model)] = per_item

    logger.info(f"Imported {len(forecasts)} external models over {len(wanted)} items from {path}")
    return ModelForecastSet(tuple(forecasts), forecasts)
