"""
Stackcast Multi-Layer Stacking
L2 stacker portfolio + L3 aggregator trained with two-level cross-validation
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple
import logging
import time

import numpy as np

from stacking.baselearners import BaseLearnerSpec
from stacking.core import ForecastTask, ModelForecastSet, QuantileForecast, TimeSeriesPanel, sort_quantiles
from stacking.cvharness import OofArrays, OofStore, build_oof
from stacking.errors import InsufficientFolds, ShapeMismatch
from stacking.losses import batch_loss
from stacking.optim import OptimConfig
from stacking.stackers import (
    StackerSpec,
    TabularSettings,
    TrainedStacker,
    combine,
    combine_arrays,
    fit_greedy,
    fit_select_best,
    fit_stackers,
)

logger = logging.getLogger(__name__)

L3_KINDS = ("SelectBest", "Greedy")

DEFAULT_PORTFOLIO = (
    "Median",
    "Greedy(S=100)",
    "Linear(mi, softmax)",
    "Linear(mt, softmax)",
    "Linear(mq, softmax)",
    "Linear(mit, positive)",
    "Linear(mtq, positive)",
    "Linear(miq, positive)",
    "Linear(mqq, positive)",
    "Linear(miqq, positive)",
    "Linear(mtqq, positive)",
    "Tabular",
    "Tabular(scaled)",
    "Tabular(scaled, mlp)",
)

# Built-in regressor standing in for the gradient-boosted and RealMLP portfolio slots
TABULAR_SUBSTITUTIONS = {
    "Tabular": "gradient-boosted trees",
    "Tabular(scaled)": "gradient-boosted trees (scaled)",
    "Tabular(scaled, mlp)": "RealMLP (scaled)",
}


@dataclass(frozen=True)
class MultiLayerSpec:
    l2: Tuple[StackerSpec, ...] = tuple(StackerSpec.parse(name) for name in DEFAULT_PORTFOLIO)
    l3: str = "Greedy"
    l3_iterations: int = 100
    k_folds: int = 5
    retrain_l2: bool = True
    l1: Tuple[BaseLearnerSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'l2', tuple(self.l2))
        object.__setattr__(self, 'l1', tuple(self.l1))
        if not self.l2:
            raise ValueError("Multi-layer stacking needs at least one L2 stacker")
        if self.l3 not in L3_KINDS:
            raise ValueError(f"Unknown L3 aggregator '{self.l3}' (expected one of {L3_KINDS})")
        if self.k_folds < 2:
            raise InsufficientFolds(self.k_folds)

    @property
    def name(self) -> str:
        return f"MultiLayer({self.l3})"


@dataclass
class L2Stage:
    """Interim L2s (folds 1..K-1), their window-K predictions, and the final L2s"""
    interim: List[TrainedStacker]
    final: List[TrainedStacker]
    window_k: OofArrays
    window_k_losses: Dict[str, float]
    interim_folds: List[int]
    final_folds: List[int]
    window_fold: int
    interim_finished: float
    retrained: bool

    @property
    def names(self) -> List[str]:
        return [ts.name for ts in self.interim]


@dataclass
class MultiLayerEnsemble:
    spec: MultiLayerSpec
    l2: List[TrainedStacker]
    interim: List[TrainedStacker]
    l3: TrainedStacker
    provenance: Dict[str, Any] = field(default_factory=dict)
    store: Optional[OofStore] = None

    @property
    def name(self) -> str:
        return self.spec.name

    @property
    def l2_names(self) -> List[str]:
        return [ts.name for ts in self.l2]

    @property
    def fit_time(self) -> float:
        """Marginal fit time: every L2 and L3 fit, base models excluded"""
        times = [ts.fit_time for ts in self.interim] + [self.l3.fit_time]
        if self.provenance.get('retrained'):
            times += [ts.fit_time for ts in self.l2]
        return float(sum(times))

    def l3_weights(self) -> Dict[str, float]:
        """Weight each L2 receives from the aggregator (one-hot for SelectBest)"""
        if self.l3.chosen is not None:
            weights = np.zeros(len(self.l2))
            weights[self.l3.chosen] = 1.0
        else:
            weights = self.l3.weights.values.ravel()
        return {name: float(w) for name, w in zip(self.l2_names, weights)}

    def to_dict(self) -> Dict:
        return {
            'name': self.name,
            'l3': self.spec.l3,
            'l3_iterations': self.spec.l3_iterations,
            'k_folds': self.spec.k_folds,
            'retrain_l2': self.spec.retrain_l2,
            'provenance': self.provenance,
            'l2': [ts.to_dict() for ts in self.l2],
            'interim': [ts.to_dict() for ts in self.interim],
            'aggregator': self.l3.to_dict()
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> 'MultiLayerEnsemble':
        l2 = [TrainedStacker.from_dict(d) for d in data['l2']]
        spec = MultiLayerSpec(tuple(ts.spec for ts in l2), data['l3'], int(data['l3_iterations']),
                              int(data['k_folds']), bool(data['retrain_l2']))
        return cls(spec, l2, [TrainedStacker.from_dict(d) for d in data['interim']],
                   TrainedStacker.from_dict(data['aggregator']), dict(data['provenance']))


def _l2_predictions(stackers: Sequence[TrainedStacker], arrays: OofArrays) -> np.ndarray:
    """(R, C, H, Q) outputs of C stackers on the same windows"""
    return np.stack([combine_arrays(ts, arrays.predictions, arrays.row_items) for ts in stackers], axis=1)


def fit_l2_stage(oof,
                 l2_specs: Sequence[StackerSpec],
                 task: ForecastTask,
                 cfg: OptimConfig = OptimConfig(),
                 tabular: TabularSettings = TabularSettings(),
                 retrain_l2: bool = True,
                 jobs: int = 1) -> L2Stage:
    """
    Fit the L2 portfolio on windows 1..K-1, predict window K, then optionally
    refit every L2 on all K windows

    Raises:
        InsufficientFolds: fewer than two validation windows
    """
    arrays = oof.to_arrays() if isinstance(oof, OofStore) else oof
    folds = sorted(set(int(k) for k in arrays.row_folds))
    if len(folds) < 2:
        raise InsufficientFolds(len(folds))
    early, window_fold = folds[:-1], folds[-1]

    logger.info(f"L2 stage: {len(l2_specs)} stackers on folds {early}, L3 window {window_fold}")
    interim = fit_stackers(l2_specs, arrays.select_folds(early), task, cfg, tabular=tabular, jobs=jobs)
    interim_finished = time.time()

    window = arrays.select_folds([window_fold])
    window_k = OofArrays(
        _l2_predictions(interim, window), window.targets, window.scales, window.row_items,
        window.row_folds, tuple(ts.name for ts in interim), window.quantile_levels
    )
    losses = {
        name: batch_loss(window_k.predictions[:, c], window_k.targets, window_k.scales, task)
        for c, name in enumerate(window_k.model_ids)
    }

    if retrain_l2:
        final = fit_stackers(l2_specs, arrays, task, cfg, tabular=tabular, jobs=jobs)
    else:
        final = interim

    return L2Stage(interim, final, window_k, losses, early, folds if retrain_l2 else early,
                   window_fold, interim_finished, retrain_l2)


def assemble_multilayer(stage: L2Stage,
                        task: ForecastTask,
                        l3: str = "Greedy",
                        l3_iterations: int = 100,
                        store: Optional[OofStore] = None) -> MultiLayerEnsemble:
    """Fit the L3 aggregator on the interim L2s' window-K predictions"""
    spec = MultiLayerSpec(tuple(ts.spec for ts in stage.interim), l3, l3_iterations,
                          max(len(stage.interim_folds) + 1, 2), stage.retrained)
    l3_started = time.time()
    clock = time.perf_counter()
    if l3 == "SelectBest":
        aggregator = fit_select_best(stage.window_k, task)
    else:
        aggregator = fit_greedy(stage.window_k, task, l3_iterations)
    aggregator.fit_time = time.perf_counter() - clock

    ensemble = MultiLayerEnsemble(spec, list(stage.final), list(stage.interim), aggregator, store=store)
    ensemble.provenance = {
        'l2_names': stage.names,
        'window_k_losses': dict(stage.window_k_losses),
        'interim_folds': list(stage.interim_folds),
        'final_folds': list(stage.final_folds),
        'window_fold': stage.window_fold,
        'l3_row_folds': sorted(set(int(k) for k in stage.window_k.row_folds)),
        'l3_model_ids': list(stage.window_k.model_ids),
        'l3_weights': None,
        'l3_loss': aggregator.train_loss,
        'retrained': stage.retrained,
        'interim_finished': stage.interim_finished,
        'l3_started': l3_started,
        'fit_times': {
            'interim': {ts.name: ts.fit_time for ts in stage.interim},
            'final': {ts.name: ts.fit_time for ts in stage.final} if stage.retrained else {},
            'l3': aggregator.fit_time
        },
        'substitutions': {name: slot for name, slot in TABULAR_SUBSTITUTIONS.items() if name in stage.names}
    }
    ensemble.provenance['l3_weights'] = ensemble.l3_weights()

    logger.info(f"{ensemble.name}: window-K loss {aggregator.train_loss:.4f} "
                f"(best L2 {min(stage.window_k_losses.values()):.4f})")
    return ensemble


def fit_multilayer(panel: TimeSeriesPanel,
                   spec: MultiLayerSpec,
                   task: ForecastTask,
                   seed: int = 0,
                   cfg: OptimConfig = OptimConfig(),
                   tabular: TabularSettings = TabularSettings(),
                   jobs: int = 1,
                   store: Optional[OofStore] = None) -> MultiLayerEnsemble:
    """
    Full multi-layer fit: OOF store over K folds, L2 stage, L3 on window K

    An existing store can be passed to skip base-model fitting.
    """
    if spec.k_folds < 2:
        raise InsufficientFolds(spec.k_folds)
    if store is None:
        store = build_oof(panel, spec.l1, spec.k_folds, task, seed, jobs=jobs)
    stage = fit_l2_stage(store, spec.l2, task, cfg, tabular, spec.retrain_l2, jobs)
    return assemble_multilayer(stage, task, spec.l3, spec.l3_iterations, store)


def predict_multilayer_from_forecasts(ensemble: MultiLayerEnsemble,
                                      base: ModelForecastSet) -> Dict[str, QuantileForecast]:
    """L2 stackers combine the base forecasts, then the L3 aggregator combines the L2 outputs"""
    item_ids = base.item_ids
    if not item_ids:
        return {}
    l2_outputs = []
    for ts in ensemble.l2:
        combined = combine(ts, base)
        l2_outputs.append(np.stack([combined[item].values for item in item_ids]))

    stacked = np.stack(l2_outputs, axis=1)
    if stacked.shape[1] != len(ensemble.l3.model_ids):
        raise ShapeMismatch(f"L3 expects {len(ensemble.l3.model_ids)} L2 outputs, got {stacked.shape[1]}")
    final = sort_quantiles(ensemble.l3.predict_array(stacked, item_ids))
    return {item: QuantileForecast(item, base.origin(item), final[n]) for n, item in enumerate(item_ids)}


def predict_multilayer(ensemble: MultiLayerEnsemble,
                       panel_train: TimeSeriesPanel,
                       task: ForecastTask) -> Dict[str, QuantileForecast]:
    """Forecast from the end of each training series with the last-fold L1 fits"""
    if ensemble.store is None or not ensemble.store.learners:
        raise ShapeMismatch("Ensemble carries no fitted base learners; use predict_multilayer_from_forecasts")

    forecasts: Dict[str, Dict[str, QuantileForecast]] = {}
    for model_id in ensemble.store.model_ids:
        learners = ensemble.store.learners.get(model_id, {})
        missing = [s.item_id for s in panel_train if s.item_id not in learners]
        if missing:
            raise ShapeMismatch(f"No last-fold '{model_id}' fit for items {missing}")
        forecasts[model_id] = {s.item_id: learners[s.item_id].predict(s, task) for s in panel_train}

    return predict_multilayer_from_forecasts(ensemble, ModelForecastSet(ensemble.store.model_ids, forecasts))


def audit_two_level(ensemble: MultiLayerEnsemble) -> List[str]:
    """Anti-leakage checks on the two-level CV provenance; returns violations, never raises"""
    prov = ensemble.provenance
    violations: List[str] = []
    window = prov.get('window_fold')
    interim_folds = list(prov.get('interim_folds', []))

    if window in interim_folds:
        violations.append(f"interim L2s were trained on the L3 window {window}")
    if interim_folds != list(range(1, len(interim_folds) + 1)) or (interim_folds and window != interim_folds[-1] + 1):
        violations.append(f"interim L2 folds {interim_folds} are not 1..K-1 for window {window}")
    if prov.get('l3_row_folds') != [window]:
        violations.append(f"L3 rows come from folds {prov.get('l3_row_folds')}, expected only [{window}]")
    if prov.get('l3_model_ids') != prov.get('l2_names'):
        violations.append("L3 inputs do not match the L2 portfolio")
    if prov.get('interim_finished', 0.0) > prov.get('l3_started', 0.0):
        violations.append("L3 fit started before all interim L2 fits finished")
    if not prov.get('retrained') and prov.get('final_folds') != interim_folds:
        violations.append("final L2s claim folds beyond the interim fit without retraining")

    return violations
