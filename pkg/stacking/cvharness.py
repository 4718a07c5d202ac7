"""
Stackcast CV Harness
Windowed time-series K-fold cross-validation, out-of-fold store construction and leakage auditing
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple
import logging
import time

import numpy as np

from stacking.baselearners import (
    DEFAULT_POLICY,
    BaseLearnerSpec,
    FittedLearner,
    ResidualQuantilePolicy,
    fit_learner,
)
from stacking.core import ForecastTask, ModelForecastSet, QuantileForecast, TimeSeries, TimeSeriesPanel
from stacking.errors import InsufficientLength, LearnerFailure, StackcastError
from stacking.losses import seasonal_error

logger = logging.getLogger(__name__)

HOLDOUT_FOLD = 0


def default_min_train(m: int) -> int:
    return max(int(m) + 1, 4)


@dataclass(frozen=True)
class FoldWindow:
    """1-based inclusive indices: train on 1..train_end, validate on val_start..val_end"""
    fold: int
    train_end: int
    val_start: int
    val_end: int

    @property
    def size(self) -> int:
        return self.val_end - self.val_start + 1

    def to_dict(self) -> Dict:
        return {'fold': self.fold, 'train_end': self.train_end,
                'val_start': self.val_start, 'val_end': self.val_end}


@dataclass(frozen=True)
class FoldPlan:
    length: int
    k_folds: int
    horizon: int
    windows: Tuple[FoldWindow, ...]

    def window(self, fold: int) -> FoldWindow:
        return self.windows[fold - 1]


def split_folds(length: int, k_folds: int, horizon: int, min_train: int = 4) -> FoldPlan:
    """
    Fold k removes the last j = K - k + 1 windows of size H for training and
    validates on the first removed window.

    Raises:
        InsufficientLength: when T - K*H < min_train, K < 1 or H < 1
    """
    if k_folds < 1 or horizon < 1 or length - k_folds * horizon < min_train:
        raise InsufficientLength(length, k_folds, horizon, min_train)

    windows = []
    for k in range(1, k_folds + 1):
        j = k_folds - k + 1
        train_end = length - j * horizon
        windows.append(FoldWindow(k, train_end, train_end + 1, length - (j - 1) * horizon))
    return FoldPlan(length, k_folds, horizon, tuple(windows))


def holdout_split(panel: TimeSeriesPanel, horizon: int) -> Tuple[TimeSeriesPanel, Dict[str, np.ndarray]]:
    """Reserve the last H observations of every series as the test window"""
    train, test = [], {}
    for series in panel:
        if len(series) <= horizon:
            raise InsufficientLength(len(series), 1, horizon, 1)
        train.append(series.head(len(series) - horizon))
        test[series.item_id] = series.values[len(series) - horizon:].copy()
    return panel.with_series(train), test


@dataclass
class OofArrays:
    """Dense view of OOF windows, rows ordered by (fold, item)"""
    predictions: np.ndarray   # (R, M, H, Q)
    targets: np.ndarray       # (R, H)
    scales: np.ndarray        # (R,)
    row_items: List[str]
    row_folds: np.ndarray     # (R,)
    model_ids: Tuple[str, ...]
    quantile_levels: Tuple[float, ...]

    @property
    def n_rows(self) -> int:
        return int(self.predictions.shape[0])

    @property
    def n_models(self) -> int:
        return len(self.model_ids)

    @property
    def horizon(self) -> int:
        return int(self.predictions.shape[2])

    def select_folds(self, folds: Sequence[int]) -> 'OofArrays':
        mask = np.isin(self.row_folds, list(folds))
        return OofArrays(
            self.predictions[mask], self.targets[mask], self.scales[mask],
            [item for item, keep in zip(self.row_items, mask) if keep],
            self.row_folds[mask], self.model_ids, self.quantile_levels
        )


@dataclass
class OofStore:
    """
    Out-of-fold base-model forecasts, targets and scales per fold

    Fold 0 holds the test window (forecasts from the last-fold learners)
    once forecast_holdout has run.
    """
    k_folds: int
    horizon: int
    quantile_levels: Tuple[float, ...]
    model_ids: Tuple[str, ...]
    seasonality_m: int = 1
    seed: int = 0
    forecasts: Dict[int, ModelForecastSet] = field(default_factory=dict)
    targets: Dict[int, Dict[str, np.ndarray]] = field(default_factory=dict)
    scales: Dict[int, Dict[str, float]] = field(default_factory=dict)
    windows: Dict[int, Dict[str, FoldWindow]] = field(default_factory=dict)
    fit_times: Dict[str, Dict[int, float]] = field(default_factory=dict)
    skipped: Dict[int, List[str]] = field(default_factory=dict)
    learners: Dict[str, Dict[str, FittedLearner]] = field(default_factory=dict)

    @property
    def folds(self) -> List[int]:
        return sorted(k for k in self.forecasts if k != HOLDOUT_FOLD)

    @property
    def has_holdout(self) -> bool:
        return HOLDOUT_FOLD in self.forecasts

    @property
    def task(self) -> ForecastTask:
        return ForecastTask(self.horizon, self.quantile_levels)

    def n_records(self, fold: int) -> int:
        return len(self.model_ids) * len(self.forecasts[fold].item_ids)

    def to_arrays(self, folds: Optional[Sequence[int]] = None) -> OofArrays:
        folds = self.folds if folds is None else list(folds)
        predictions, targets, scales, items, fold_ids = [], [], [], [], []
        for k in folds:
            fold_set = self.forecasts[k]
            item_ids = fold_set.item_ids
            if not item_ids:
                continue
            predictions.append(fold_set.to_array(item_ids, self.model_ids))
            targets.extend(self.targets[k][i] for i in item_ids)
            scales.extend(self.scales[k][i] for i in item_ids)
            items.extend(item_ids)
            fold_ids.extend([k] * len(item_ids))

        n_q = len(self.quantile_levels)
        return OofArrays(
            np.concatenate(predictions) if predictions
            else np.empty((0, len(self.model_ids), self.horizon, n_q)),
            np.asarray(targets, dtype=np.float64).reshape(-1, self.horizon),
            np.asarray(scales, dtype=np.float64),
            items,
            np.asarray(fold_ids, dtype=int),
            self.model_ids,
            self.quantile_levels
        )

    def holdout_arrays(self) -> OofArrays:
        return self.to_arrays([HOLDOUT_FOLD])

    def marginal_fit_time(self, model_id: str) -> float:
        return float(sum(self.fit_times.get(model_id, {}).values()))

    def summary(self) -> Dict:
        return {
            'k_folds': self.k_folds,
            'horizon': self.horizon,
            'models': list(self.model_ids),
            'folds': {k: len(self.forecasts[k].item_ids) for k in self.folds},
            'skipped': {k: len(v) for k, v in self.skipped.items() if v},
            'holdout': self.has_holdout
        }


def _run_fits(jobs: int, calls: List[Callable[[], Tuple[FittedLearner, QuantileForecast, float]]]):
    """Run independent fit calls; results come back in submission order"""
    if jobs <= 1 or len(calls) <= 1:
        return [call() for call in calls]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(call) for call in calls]
        return [f.result() for f in futures]


def _fit_one(spec: BaseLearnerSpec, history: TimeSeries, m: int, task: ForecastTask,
             policy: ResidualQuantilePolicy, fold: int):
    def call():
        started = time.perf_counter()
        try:
            learner = fit_learner(spec, history, m)
            forecast = learner.predict(history, task, policy)
        except StackcastError as exc:
            raise LearnerFailure(fold, spec.name, history.item_id, exc) from exc
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            raise LearnerFailure(fold, spec.name, history.item_id, exc) from exc
        return learner, forecast, time.perf_counter() - started
    return call


def build_oof(panel: TimeSeriesPanel,
              specs: Sequence[BaseLearnerSpec],
              k_folds: int,
              task: ForecastTask,
              seed: int = 0,
              min_train: Optional[int] = None,
              jobs: int = 1,
              policy: ResidualQuantilePolicy = DEFAULT_POLICY) -> OofStore:
    """
    Refit every base learner from scratch on each fold's training prefix and
    collect its forecasts over the fold's validation window

    Items too short for a fold's training minimum are skipped in that fold only;
    a minimum of m or less is raised to m + 1 so every prefix has a seasonal scale.
    The learners fitted on the last fold are kept on the store for test prediction.

    Raises:
        LearnerFailure: any learner error, annotated with fold, model and item
    """
    m = panel.seasonality_m
    min_train = default_min_train(m) if min_train is None else int(min_train)
    if min_train <= m:
        logger.warning(f"min_train={min_train} does not exceed seasonality {m}; using {m + 1}")
        min_train = m + 1
    model_ids = tuple(spec.name for spec in specs)
    store = OofStore(k_folds, task.horizon, task.quantile_levels, model_ids, m, seed)
    store.fit_times = {name: {} for name in model_ids}

    logger.info(f"Building OOF store: {len(panel)} items x {len(specs)} models x {k_folds} folds")

    for k in range(1, k_folds + 1):
        j = k_folds - k + 1
        participants: List[TimeSeries] = []
        store.windows[k] = {}
        store.skipped[k] = []
        store.targets[k] = {}
        store.scales[k] = {}

        for series in panel:
            train_end = len(series) - j * task.horizon
            if train_end < min_train:
                store.skipped[k].append(series.item_id)
                continue
            participants.append(series.head(train_end))
            store.windows[k][series.item_id] = FoldWindow(
                k, train_end, train_end + 1, train_end + task.horizon
            )
            store.targets[k][series.item_id] = series.values[train_end:train_end + task.horizon].copy()
            store.scales[k][series.item_id] = seasonal_error(series.values[:train_end], m, series.item_id).a

        if store.skipped[k]:
            logger.warning(f"Fold {k}: skipped {len(store.skipped[k])} items shorter than "
                           f"{min_train + j * task.horizon}")

        calls = [_fit_one(spec, history, m, task, policy, k) for spec in specs for history in participants]
        results = _run_fits(jobs, calls)

        forecasts: Dict[str, Dict[str, QuantileForecast]] = {name: {} for name in model_ids}
        position = 0
        for spec in specs:
            elapsed = 0.0
            for history in participants:
                learner, forecast, seconds = results[position]
                position += 1
                forecasts[spec.name][history.item_id] = forecast
                elapsed += seconds
                if k == k_folds:
                    store.learners.setdefault(spec.name, {})[history.item_id] = learner
            store.fit_times[spec.name][k] = elapsed

        store.forecasts[k] = ModelForecastSet(model_ids, forecasts)
        logger.info(f"Fold {k}/{k_folds}: {len(participants)} items, {len(calls)} fits")

    return store


def forecast_holdout(store: OofStore,
                     train_panel: TimeSeriesPanel,
                     test_targets: Dict[str, np.ndarray],
                     specs: Sequence[BaseLearnerSpec],
                     task: ForecastTask,
                     policy: ResidualQuantilePolicy = DEFAULT_POLICY) -> ModelForecastSet:
    """
    Forecast the test window with the last-fold learners applied to the full
    training prefix, and record it on the store as fold 0
    """
    m = train_panel.seasonality_m
    forecasts: Dict[str, Dict[str, QuantileForecast]] = {}
    store.windows[HOLDOUT_FOLD] = {}
    store.targets[HOLDOUT_FOLD] = {}
    store.scales[HOLDOUT_FOLD] = {}

    for spec in specs:
        forecasts[spec.name] = {}
        learners = store.learners.get(spec.name, {})
        for series in train_panel:
            learner = learners.get(series.item_id)
            if learner is None:
                logger.warning(f"No last-fold fit of '{spec.name}' for '{series.item_id}'; fitting on the full prefix")
                learner = fit_learner(spec, series, m)
            try:
                forecasts[spec.name][series.item_id] = learner.predict(series, task, policy)
            except StackcastError as exc:
                raise LearnerFailure(HOLDOUT_FOLD, spec.name, series.item_id, exc) from exc

    for series in train_panel:
        n = len(series)
        store.windows[HOLDOUT_FOLD][series.item_id] = FoldWindow(HOLDOUT_FOLD, n, n + 1, n + task.horizon)
        store.targets[HOLDOUT_FOLD][series.item_id] = np.asarray(test_targets[series.item_id], dtype=np.float64)
        store.scales[HOLDOUT_FOLD][series.item_id] = seasonal_error(series.values, m, series.item_id).a

    holdout = ModelForecastSet(store.model_ids, forecasts)
    store.forecasts[HOLDOUT_FOLD] = holdout
    return holdout


def backtest(panel: TimeSeriesPanel,
             specs: Sequence[BaseLearnerSpec],
             k_folds: int,
             task: ForecastTask,
             seed: int = 0,
             min_train: Optional[int] = None,
             jobs: int = 1) -> OofStore:
    """Holdout split, OOF construction on the training part, then test-window forecasts"""
    train_panel, test_targets = holdout_split(panel, task.horizon)
    store = build_oof(train_panel, specs, k_folds, task, seed, min_train, jobs)
    forecast_holdout(store, train_panel, test_targets, specs, task)
    return store


@dataclass(frozen=True)
class LeakageViolation:
    fold: int
    model: str
    item_id: str
    reason: str

    def __str__(self) -> str:
        return f"fold {self.fold}, model '{self.model}', item '{self.item_id}': {self.reason}"


def leakage_check(store: OofStore) -> List[LeakageViolation]:
    """Every forecast must originate before its window and cover it exactly; never raises"""
    violations: List[LeakageViolation] = []
    for k in sorted(store.forecasts):
        fold_set = store.forecasts[k]
        for model in fold_set.model_ids:
            for item_id, forecast in fold_set.forecasts[model].items():
                window = store.windows.get(k, {}).get(item_id)
                if window is None:
                    violations.append(LeakageViolation(k, model, item_id, "no window recorded"))
                    continue
                if forecast.origin_t >= window.val_start:
                    violations.append(LeakageViolation(
                        k, model, item_id,
                        f"origin {forecast.origin_t} not before window start {window.val_start}"))
                if window.size != store.horizon or forecast.horizon != window.size:
                    violations.append(LeakageViolation(
                        k, model, item_id,
                        f"forecast covers {forecast.horizon} steps, window {window.val_start}..{window.val_end}"))
                target = store.targets.get(k, {}).get(item_id)
                if target is not None and target.shape[0] != window.size:
                    violations.append(LeakageViolation(
                        k, model, item_id, f"target length {target.shape[0]} != window size {window.size}"))

    if violations:
        logger.warning(f"Leakage check found {len(violations)} violations")
    return violations
