"""
Stackcast Stackers
Combiner zoo: averages, model selection, performance weights, greedy ensemble selection,
linear stackers over every weight tying, and the tabular (row-wise regression) stacker
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union
import logging
import re
import time

import numpy as np

from stacking.core import ForecastTask, ModelForecastSet, QuantileForecast, sort_quantiles
from stacking.cvharness import OofArrays, OofStore
from stacking.errors import InsufficientHistory, ShapeMismatch
from stacking.losses import batch_loss, batch_loss_and_grad
from stacking.optim import OptimConfig, ParamPacker, minimize

logger = logging.getLogger(__name__)

TYINGS = ("m", "mi", "mt", "mq", "mit", "miq", "mtq", "mitq", "mqq", "miqq", "mtqq")
PARAMETERIZATIONS = ("softmax", "positive")
H_KINDS = ("inv", "sqr", "exp")
EXP_CAP = 700.0
SCALE_EPS = 1e-8
TABULAR_MIN_ROWS = 3


class StackerFamily(str, Enum):
    MEAN = "Mean"
    MEDIAN = "Median"
    SELECT_BEST = "SelectBest"
    PERF_WEIGHTED = "PerfWeighted"
    GREEDY = "Greedy"
    LINEAR = "Linear"
    TABULAR = "Tabular"


_SPEC_PATTERN = re.compile(r"^\s*(\w+)\s*(?:\((.*)\))?\s*$")


@dataclass(frozen=True)
class StackerSpec:
    """One combiner configuration; name is the canonical string used in files and reports"""
    family: StackerFamily
    h_kind: Optional[str] = None
    iterations: Optional[int] = None
    tying: Optional[str] = None
    param: Optional[str] = None
    scaled: bool = False
    regressor: str = "default"

    def __post_init__(self):
        object.__setattr__(self, 'family', StackerFamily(self.family))
        family = self.family

        if family == StackerFamily.GREEDY:
            if self.iterations is None:
                object.__setattr__(self, 'iterations', 100)
            if int(self.iterations) < 1:
                raise ValueError(f"Greedy needs S >= 1, got {self.iterations}")
        elif self.iterations is not None:
            raise ValueError("Only Greedy takes an iteration count")

        if family == StackerFamily.LINEAR:
            if self.tying not in TYINGS:
                raise ValueError(f"Unknown tying '{self.tying}' (expected one of {TYINGS})")
            if self.param is None:
                object.__setattr__(self, 'param', "softmax")
            if self.param not in PARAMETERIZATIONS:
                raise ValueError(f"Unknown parameterization '{self.param}'")
        elif self.tying is not None or self.param is not None:
            raise ValueError("tying/param only apply to Linear stackers")

        if family == StackerFamily.PERF_WEIGHTED:
            if self.h_kind is None:
                object.__setattr__(self, 'h_kind', "inv")
            if self.h_kind not in H_KINDS:
                raise ValueError(f"Unknown performance transform '{self.h_kind}'")

        if family == StackerFamily.TABULAR and self.regressor not in ("default", "mlp"):
            raise ValueError(f"Unknown tabular regressor '{self.regressor}'")

    @property
    def name(self) -> str:
        family = self.family
        if family == StackerFamily.PERF_WEIGHTED:
            return f"PerfWeighted({self.h_kind})"
        if family == StackerFamily.GREEDY:
            return f"Greedy(S={self.iterations})"
        if family == StackerFamily.LINEAR:
            return f"Linear({self.tying}, {self.param})"
        if family == StackerFamily.TABULAR:
            args = [a for a, on in (("scaled", self.scaled), ("mlp", self.regressor == "mlp")) if on]
            return f"Tabular({', '.join(args)})" if args else "Tabular"
        return family.value

    @property
    def slug(self) -> str:
        return re.sub(r"[^a-z0-9]+", "_", self.name.lower()).strip("_")

    @classmethod
    def parse(cls, text: str) -> 'StackerSpec':
        """Inverse of name: 'Greedy(S=100)', 'Linear(mq, softmax)', 'Tabular(scaled, mlp)', ..."""
        match = _SPEC_PATTERN.match(text)
        if not match:
            raise ValueError(f"Cannot parse stacker spec '{text}'")
        family = StackerFamily(match.group(1))
        args = [a.strip() for a in (match.group(2) or "").split(",") if a.strip()]

        if family == StackerFamily.PERF_WEIGHTED:
            h_kind = args[0].lower().replace("h_", "") if args else None
            return cls(family, h_kind=h_kind)
        if family == StackerFamily.GREEDY:
            iterations = int(args[0].split("=")[-1]) if args else None
            return cls(family, iterations=iterations)
        if family == StackerFamily.LINEAR:
            if not args:
                raise ValueError(f"Linear stacker needs a tying: '{text}'")
            return cls(family, tying=args[0], param=args[1] if len(args) > 1 else None)
        if family == StackerFamily.TABULAR:
            unknown = set(args) - {"scaled", "mlp"}
            if unknown:
                raise ValueError(f"Unknown Tabular options {sorted(unknown)}")
            return cls(family, scaled="scaled" in args, regressor="mlp" if "mlp" in args else "default")
        if args:
            raise ValueError(f"{family.value} takes no arguments: '{text}'")
        return cls(family)


# Weight tensors

class TyingLayout(NamedTuple):
    items: bool
    horizon: bool
    quantile: bool
    across: bool


def tying_layout(tying: str) -> TyingLayout:
    """Which axes carry their own weights; a trailing 'qq' adds the input-quantile axis"""
    across = tying.endswith("qq")
    base = tying[:-1] if across else tying
    return TyingLayout('i' in base, 't' in base, 'q' in base, across)


def weight_shape(tying: str, n_items: int, horizon: int, n_quantiles: int, n_models: int) -> Tuple[int, ...]:
    layout = tying_layout(tying)
    shape = (n_items if layout.items else 1,
             horizon if layout.horizon else 1,
             n_quantiles if layout.quantile else 1)
    if layout.across:
        shape += (n_quantiles,)
    return shape + (n_models,)


def _mixing_axes(across: bool) -> Tuple[int, ...]:
    return (-2, -1) if across else (-1,)


def realize_weights(z: np.ndarray, param: str, across: bool) -> np.ndarray:
    """Map unconstrained parameters to weights (simplex via softmax, orthant via squaring)"""
    if param == "positive":
        return z * z
    axes = _mixing_axes(across)
    shifted = np.exp(z - z.max(axis=axes, keepdims=True))
    return shifted / shifted.sum(axis=axes, keepdims=True)


def _realize_grad(z: np.ndarray, w: np.ndarray, grad_w: np.ndarray, param: str, across: bool) -> np.ndarray:
    if param == "positive":
        return 2.0 * z * grad_w
    axes = _mixing_axes(across)
    return w * (grad_w - np.sum(w * grad_w, axis=axes, keepdims=True))


def initial_parameters(shape: Tuple[int, ...], param: str, across: bool) -> np.ndarray:
    """Uniform start: z = 0 under softmax, z = 1/sqrt(size of the mixing slice) when positive"""
    if param == "softmax":
        return np.zeros(shape)
    slice_size = shape[-1] * (shape[-2] if across else 1)
    return np.full(shape, 1.0 / np.sqrt(slice_size))


def _apply_weights(rows_w: np.ndarray, inputs: np.ndarray, across: bool) -> np.ndarray:
    """rows_w: (R, H|1, Q|1, [Q'], M); inputs: (R, M, H, Q) -> (R, H, Q)"""
    n_rows, n_models, horizon, n_q = inputs.shape
    if across:
        full = np.broadcast_to(rows_w, (n_rows, horizon, n_q, n_q, n_models))
        return np.einsum('rhqpm,rmhp->rhq', full, inputs)
    full = np.broadcast_to(rows_w, (n_rows, horizon, n_q, n_models))
    return np.einsum('rhqm,rmhq->rhq', full, inputs)


def _weights_gradient(grad_out: np.ndarray,
                      inputs: np.ndarray,
                      layout: TyingLayout,
                      row_index: np.ndarray,
                      n_items: int) -> np.ndarray:
    """Reduce the per-row weight gradient onto the tied tensor"""
    if layout.across:
        grad = np.einsum('rhq,rmhp->rhqpm', grad_out, inputs)
    else:
        grad = np.einsum('rhq,rmhq->rhqm', grad_out, inputs)
    if not layout.horizon:
        grad = grad.sum(axis=1, keepdims=True)
    if not layout.quantile:
        grad = grad.sum(axis=2, keepdims=True)
    if layout.items:
        reduced = np.zeros((n_items,) + grad.shape[1:])
        np.add.at(reduced, row_index, grad)
        return reduced
    return grad.sum(axis=0, keepdims=True)


@dataclass
class WeightTensor:
    """Combiner weights over the untied axes (item, horizon, quantile, input quantile) and models"""
    tying: str
    param: str
    values: np.ndarray
    item_ids: Tuple[str, ...] = ()

    @property
    def layout(self) -> TyingLayout:
        return tying_layout(self.tying)

    def rows(self, row_items: Sequence[str]) -> np.ndarray:
        """Per-row weights; unseen items get the mean of the learned item weights"""
        if not self.layout.items:
            return np.broadcast_to(self.values, (len(row_items),) + self.values.shape[1:])
        index = {item: n for n, item in enumerate(self.item_ids)}
        fallback = self.values.mean(axis=0)
        unseen = sorted({item for item in row_items if item not in index})
        if unseen:
            logger.warning(f"{len(unseen)} items unseen in training for tying '{self.tying}'; "
                           f"using mean item weights")
        return np.stack([self.values[index[item]] if item in index else fallback for item in row_items])

    def apply(self, inputs: np.ndarray, row_items: Sequence[str]) -> np.ndarray:
        return _apply_weights(self.rows(row_items), inputs, self.layout.across)

    def to_dict(self) -> Dict:
        return {
            'tying': self.tying,
            'param': self.param,
            'shape': list(self.values.shape),
            'values': self.values.ravel().tolist(),
            'item_ids': list(self.item_ids)
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> 'WeightTensor':
        values = np.asarray(data['values'], dtype=np.float64).reshape(data['shape'])
        return cls(data['tying'], data['param'], values, tuple(data.get('item_ids', ())))


def model_weights(weights: Sequence[float]) -> WeightTensor:
    """A single weight vector shared by every item, step and quantile"""
    values = np.asarray(weights, dtype=np.float64).reshape(1, 1, 1, -1)
    return WeightTensor("m", "fixed", values)


# Tabular regressor

@dataclass(frozen=True)
class RegressorConfig:
    hidden: int = 16
    skip: bool = True
    max_steps: Optional[int] = None

    @classmethod
    def for_spec(cls, spec: StackerSpec, hidden: int = 16, mlp_hidden: int = 32,
                 max_steps: Optional[int] = None) -> 'RegressorConfig':
        if spec.regressor == "mlp":
            return cls(hidden=mlp_hidden, skip=False, max_steps=max_steps)
        return cls(hidden=hidden, skip=True, max_steps=max_steps)


@dataclass
class TabularRowSet:
    """One row per (fold, item, h); features ordered model-major, quantile-minor"""
    features: np.ndarray   # (R*H, M*Q)
    targets: np.ndarray    # (R*H,)
    row_keys: List[Tuple[int, str, int]]
    n_windows: int
    horizon: int

    @property
    def n_rows(self) -> int:
        return int(self.features.shape[0])


def tabular_features(predictions: np.ndarray) -> np.ndarray:
    """(R, M, H, Q) -> (R*H, M*Q) with column index m*Q + q"""
    n_rows, n_models, horizon, n_q = predictions.shape
    return predictions.transpose(0, 2, 1, 3).reshape(n_rows * horizon, n_models * n_q)


def build_tabular_rows(oof: Union[OofStore, OofArrays], folds: Optional[Sequence[int]] = None) -> TabularRowSet:
    arrays = _as_arrays(oof, folds)
    horizon = arrays.horizon
    keys = [(int(k), item, h) for k, item in zip(arrays.row_folds, arrays.row_items)
            for h in range(1, horizon + 1)]
    return TabularRowSet(tabular_features(arrays.predictions), arrays.targets.reshape(-1),
                         keys, arrays.n_rows, horizon)


def row_scaling(features: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-row alpha = 1/(sigma + eps), beta = -mu * alpha"""
    mu = features.mean(axis=1)
    sigma = features.std(axis=1)
    alpha = 1.0 / (sigma + SCALE_EPS)
    return alpha, -mu * alpha


def unscale(outputs: np.ndarray, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    """g' = (g - beta) / alpha, applied row-wise"""
    return (outputs - beta[:, None]) / alpha[:, None]


class TabularRegressor:
    """
    Multi-quantile feedforward regressor with one output per level

    output = tanh(x W1 + b1) W2 + b2 [+ x S]; the skip S starts as the uniform
    model average of the matching quantile and the head W2 starts at zero.
    """

    def __init__(self, n_models: int, n_quantiles: int, config: RegressorConfig, seed: int = 0):
        self.n_models = n_models
        self.n_quantiles = n_quantiles
        self.config = config
        n_features = n_models * n_quantiles
        shapes = {'W1': (n_features, config.hidden), 'b1': (config.hidden,),
                  'W2': (config.hidden, n_quantiles), 'b2': (n_quantiles,)}
        if config.skip:
            shapes['S'] = (n_features, n_quantiles)
        self.packer = ParamPacker(shapes)

        rng = np.random.default_rng(seed)
        self.params: Dict[str, np.ndarray] = {
            'W1': rng.normal(0.0, 1.0 / np.sqrt(n_features), size=shapes['W1']),
            'b1': np.zeros(config.hidden),
            'W2': np.zeros(shapes['W2']),
            'b2': np.zeros(n_quantiles),
        }
        if config.skip:
            skip = np.zeros(shapes['S'])
            for m in range(n_models):
                skip[m * n_quantiles + np.arange(n_quantiles), np.arange(n_quantiles)] = 1.0 / n_models
            self.params['S'] = skip

    def forward(self, features: np.ndarray, params: Optional[Mapping[str, np.ndarray]] = None):
        params = self.params if params is None else params
        hidden = np.tanh(features @ params['W1'] + params['b1'])
        out = hidden @ params['W2'] + params['b2']
        if self.config.skip:
            out = out + features @ params['S']
        return out, hidden

    def backward(self, features: np.ndarray, hidden: np.ndarray, grad_out: np.ndarray,
                 params: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
        grad_hidden = (grad_out @ params['W2'].T) * (1.0 - hidden * hidden)
        grads = {
            'W1': features.T @ grad_hidden,
            'b1': grad_hidden.sum(axis=0),
            'W2': hidden.T @ grad_out,
            'b2': grad_out.sum(axis=0),
        }
        if self.config.skip:
            grads['S'] = features.T @ grad_out
        return grads

    def predict(self, features: np.ndarray) -> np.ndarray:
        return self.forward(features)[0]

    def to_dict(self) -> Dict:
        return {
            'hidden': self.config.hidden,
            'skip': self.config.skip,
            'n_models': self.n_models,
            'n_quantiles': self.n_quantiles,
            'params': {name: value.tolist() for name, value in self.params.items()}
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> 'TabularRegressor':
        regressor = cls(data['n_models'], data['n_quantiles'],
                        RegressorConfig(hidden=data['hidden'], skip=data['skip']))
        regressor.params = {name: np.asarray(value, dtype=np.float64)
                            for name, value in data['params'].items()}
        return regressor


# Trained stackers

@dataclass
class TrainedStacker:
    spec: StackerSpec
    model_ids: Tuple[str, ...]
    horizon: int
    quantile_levels: Tuple[float, ...]
    fit_time: float = 0.0
    train_loss: float = float('nan')
    chosen: Optional[int] = None
    weights: Optional[WeightTensor] = None
    regressor: Optional[TabularRegressor] = None
    notes: Dict[str, Any] = field(default_factory=dict)

    @property
    def name(self) -> str:
        return self.spec.name

    def predict_array(self, inputs: np.ndarray, row_items: Sequence[str]) -> np.ndarray:
        """Raw combined forecast (R, H, Q) from (R, M, H, Q) inputs, before quantile sorting"""
        expected = (len(self.model_ids), self.horizon, len(self.quantile_levels))
        if inputs.ndim != 4 or inputs.shape[1:] != expected:
            raise ShapeMismatch(f"Stacker '{self.name}' expects (M, H, Q) = {expected}, got {inputs.shape[1:]}")

        family = self.spec.family
        if family == StackerFamily.MEAN:
            return inputs.mean(axis=1)
        if family == StackerFamily.MEDIAN:
            return np.median(inputs, axis=1)
        if family == StackerFamily.SELECT_BEST:
            return inputs[:, self.chosen].copy()
        if family == StackerFamily.TABULAR:
            return _tabular_predict(self.regressor, self.spec.scaled, inputs)
        return self.weights.apply(inputs, row_items)

    def to_dict(self) -> Dict:
        return {
            'name': self.name,
            'model_ids': list(self.model_ids),
            'horizon': self.horizon,
            'quantile_levels': list(self.quantile_levels),
            'fit_time': self.fit_time,
            'train_loss': self.train_loss,
            'chosen': self.chosen,
            'weights': self.weights.to_dict() if self.weights is not None else None,
            'regressor': self.regressor.to_dict() if self.regressor is not None else None,
            'notes': self.notes
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> 'TrainedStacker':
        return cls(
            spec=StackerSpec.parse(data['name']),
            model_ids=tuple(data['model_ids']),
            horizon=int(data['horizon']),
            quantile_levels=tuple(float(q) for q in data['quantile_levels']),
            fit_time=float(data.get('fit_time', 0.0)),
            train_loss=float(data.get('train_loss', float('nan'))),
            chosen=data.get('chosen'),
            weights=WeightTensor.from_dict(data['weights']) if data.get('weights') else None,
            regressor=TabularRegressor.from_dict(data['regressor']) if data.get('regressor') else None,
            notes=dict(data.get('notes') or {})
        )


def combine(ts: TrainedStacker, inputs: ModelForecastSet) -> Dict[str, QuantileForecast]:
    """
    Apply a trained stacker to base forecasts, matching models by id

    Raises:
        ShapeMismatch: missing model or (H, Q) differing from training
    """
    missing = [m for m in ts.model_ids if m not in inputs.forecasts]
    if missing:
        raise ShapeMismatch(f"Stacker '{ts.name}' needs forecasts of models {missing}")
    item_ids = inputs.item_ids
    if not item_ids:
        return {}
    if tuple(inputs.shape) != (ts.horizon, len(ts.quantile_levels)):
        raise ShapeMismatch(
            f"Stacker '{ts.name}' trained on (H, Q) = {(ts.horizon, len(ts.quantile_levels))}, "
            f"inputs have {tuple(inputs.shape)}"
        )

    combined = sort_quantiles(ts.predict_array(inputs.to_array(item_ids, ts.model_ids), item_ids))
    return {item: QuantileForecast(item, inputs.origin(item), combined[n]) for n, item in enumerate(item_ids)}


def combine_arrays(ts: TrainedStacker, inputs: np.ndarray, row_items: Sequence[str]) -> np.ndarray:
    """Array form of combine with the same output hygiene"""
    return sort_quantiles(ts.predict_array(inputs, row_items))


# Fitting

def _as_arrays(oof: Union[OofStore, OofArrays], folds: Optional[Sequence[int]] = None) -> OofArrays:
    if isinstance(oof, OofStore):
        return oof.to_arrays(folds)
    return oof.select_folds(folds) if folds is not None else oof


def _trained(spec: StackerSpec, arrays: OofArrays, **payload) -> TrainedStacker:
    return TrainedStacker(spec, tuple(arrays.model_ids), arrays.horizon, tuple(arrays.quantile_levels), **payload)


def model_losses(arrays: OofArrays, task: ForecastTask) -> np.ndarray:
    """Dataset loss of every model over all OOF windows"""
    return np.array([
        batch_loss(arrays.predictions[:, m], arrays.targets, arrays.scales, task)
        for m in range(arrays.n_models)
    ])


def fit_mean(oof, task: ForecastTask, folds=None) -> TrainedStacker:
    arrays = _as_arrays(oof, folds)
    loss = batch_loss(arrays.predictions.mean(axis=1), arrays.targets, arrays.scales, task)
    return _trained(StackerSpec(StackerFamily.MEAN), arrays, train_loss=loss)


def fit_median(oof, task: ForecastTask, folds=None) -> TrainedStacker:
    arrays = _as_arrays(oof, folds)
    loss = batch_loss(np.median(arrays.predictions, axis=1), arrays.targets, arrays.scales, task)
    return _trained(StackerSpec(StackerFamily.MEDIAN), arrays, train_loss=loss)


def fit_select_best(oof, task: ForecastTask, folds=None) -> TrainedStacker:
    """m* = argmin of OOF dataset loss, ties to the lowest model index"""
    arrays = _as_arrays(oof, folds)
    losses = model_losses(arrays, task)
    chosen = int(np.argmin(losses))
    return _trained(StackerSpec(StackerFamily.SELECT_BEST), arrays,
                    chosen=chosen, train_loss=float(losses[chosen]))


def performance_weights(losses: Sequence[float], h_kind: str) -> np.ndarray:
    """
    Weights proportional to h(L) of the normalized losses L (sum 1)

    Zero normalized losses get all the weight, shared uniformly among them.
    """
    losses = np.asarray(losses, dtype=np.float64)
    total = losses.sum()
    if total <= 0:
        return np.full(losses.shape[0], 1.0 / losses.shape[0])
    normalized = losses / total

    zero = normalized <= 0
    if zero.any():
        logger.warning(f"{int(zero.sum())} models have zero OOF loss; weighting them uniformly")
        return zero / zero.sum()

    inverse = 1.0 / normalized
    if h_kind == "inv":
        raw = inverse
    elif h_kind == "sqr":
        raw = inverse ** 2
    else:
        log_raw = np.minimum(inverse, EXP_CAP)
        raw = np.exp(log_raw - log_raw.max())
    return raw / raw.sum()


def fit_performance_weights(oof, task: ForecastTask, h_kind: str = "inv", folds=None) -> TrainedStacker:
    arrays = _as_arrays(oof, folds)
    weights = performance_weights(model_losses(arrays, task), h_kind)
    tensor = model_weights(weights)
    loss = batch_loss(tensor.apply(arrays.predictions, arrays.row_items), arrays.targets, arrays.scales, task)
    return _trained(StackerSpec(StackerFamily.PERF_WEIGHTED, h_kind=h_kind), arrays,
                    weights=tensor, train_loss=loss)


def greedy_weights(arrays: OofArrays, task: ForecastTask, iterations: int) -> Tuple[np.ndarray, float, int]:
    """
    Greedy ensemble selection with replacement

    Returns:
        (weights of the best iteration, its loss, best iteration j*)
    """
    n_models = arrays.n_models
    counts = np.zeros(n_models)
    running = np.zeros_like(arrays.predictions[:, 0])
    best_loss, best_counts, best_j = np.inf, None, 0

    for j in range(1, iterations + 1):
        candidates = [
            batch_loss((running + arrays.predictions[:, m]) / j, arrays.targets, arrays.scales, task)
            for m in range(n_models)
        ]
        pick = int(np.argmin(candidates))
        counts[pick] += 1
        running = running + arrays.predictions[:, pick]
        if candidates[pick] < best_loss:
            best_loss, best_counts, best_j = candidates[pick], counts.copy(), j

    return best_counts / best_j, float(best_loss), best_j


def fit_greedy(oof, task: ForecastTask, iterations: int = 100, folds=None) -> TrainedStacker:
    arrays = _as_arrays(oof, folds)
    weights, loss, best_j = greedy_weights(arrays, task, iterations)
    return _trained(StackerSpec(StackerFamily.GREEDY, iterations=iterations), arrays,
                    weights=model_weights(weights), train_loss=loss, notes={'best_iteration': best_j})


def linear_objective(arrays: OofArrays, task: ForecastTask, tying: str, param: str):
    """
    Objective z -> (loss, grad) of a linear stacker on OOF windows

    Returns:
        (objective, parameter shape, training item order)
    """
    layout = tying_layout(tying)
    item_ids = tuple(dict.fromkeys(arrays.row_items))
    index = {item: n for n, item in enumerate(item_ids)}
    row_index = np.array([index[item] for item in arrays.row_items], dtype=int)
    shape = weight_shape(tying, len(item_ids), arrays.horizon, len(arrays.quantile_levels), arrays.n_models)

    def objective(flat: np.ndarray):
        z = flat.reshape(shape)
        w = realize_weights(z, param, layout.across)
        rows_w = w[row_index] if layout.items else w
        out = _apply_weights(np.broadcast_to(rows_w, (arrays.n_rows,) + w.shape[1:]),
                             arrays.predictions, layout.across)
        loss, grad_out = batch_loss_and_grad(out, arrays.targets, arrays.scales, task)
        grad_w = _weights_gradient(grad_out, arrays.predictions, layout, row_index, len(item_ids))
        return loss, _realize_grad(z, w, grad_w, param, layout.across).ravel()

    return objective, shape, item_ids


def fit_linear(oof, task: ForecastTask, tying: str = "m", param: str = "softmax",
               cfg: OptimConfig = OptimConfig(), folds=None) -> TrainedStacker:
    """Minimize the OOF task loss over tied weights from a uniform start (best iterate kept)"""
    arrays = _as_arrays(oof, folds)
    spec = StackerSpec(StackerFamily.LINEAR, tying=tying, param=param)
    objective, shape, item_ids = linear_objective(arrays, task, tying, param)
    across = tying_layout(tying).across

    result = minimize(objective, initial_parameters(shape, param, across).ravel(), cfg)
    values = realize_weights(result.best_params.reshape(shape), param, across)
    tensor = WeightTensor(tying, param, values, item_ids if tying_layout(tying).items else ())
    return _trained(spec, arrays, weights=tensor, train_loss=result.best_loss,
                    notes={'steps': result.steps_taken, 'stop_reason': result.stop_reason.value,
                           'initial_loss': result.initial_loss})


def _tabular_predict(regressor: TabularRegressor, scaled: bool, inputs: np.ndarray) -> np.ndarray:
    n_rows, _, horizon, n_q = inputs.shape
    features = tabular_features(inputs)
    if scaled:
        alpha, beta = row_scaling(features)
        outputs = unscale(regressor.predict(alpha[:, None] * features + beta[:, None]), alpha, beta)
    else:
        outputs = regressor.predict(features)
    return outputs.reshape(n_rows, horizon, n_q)


def fit_tabular(oof, task: ForecastTask, scaled: bool = False,
                regressor_cfg: RegressorConfig = RegressorConfig(),
                cfg: OptimConfig = OptimConfig(), folds=None,
                regressor_kind: str = "default") -> TrainedStacker:
    """
    Row-wise multi-quantile regression on the base predictions, trained on the
    task loss in original units (scaled: features standardized per row and
    outputs mapped back through g')
    """
    arrays = _as_arrays(oof, folds)
    rows = build_tabular_rows(arrays)
    if rows.n_rows < TABULAR_MIN_ROWS:
        raise InsufficientHistory("Tabular", rows.n_rows, TABULAR_MIN_ROWS)

    n_q = len(arrays.quantile_levels)
    regressor = TabularRegressor(arrays.n_models, n_q, regressor_cfg, cfg.seed)
    features = rows.features
    if scaled:
        alpha, beta = row_scaling(features)
        features = alpha[:, None] * features + beta[:, None]

    packer = regressor.packer
    window_shape = (arrays.n_rows, arrays.horizon, n_q)

    def objective(flat: np.ndarray):
        params = packer.unpack(flat)
        out, hidden = regressor.forward(features, params)
        if scaled:
            out = unscale(out, alpha, beta)
        loss, grad = batch_loss_and_grad(out.reshape(window_shape), arrays.targets, arrays.scales, task)
        grad = grad.reshape(out.shape)
        if scaled:
            grad = grad / alpha[:, None]
        return loss, packer.pack(regressor.backward(features, hidden, grad, params))

    if regressor_cfg.max_steps is not None:
        cfg = cfg.with_overrides(max_steps=regressor_cfg.max_steps)
    result = minimize(objective, packer.pack(regressor.params), cfg)
    regressor.params = packer.unpack(result.best_params.copy())

    spec = StackerSpec(StackerFamily.TABULAR, scaled=scaled, regressor=regressor_kind)
    return _trained(spec, arrays, regressor=regressor, train_loss=result.best_loss,
                    notes={'steps': result.steps_taken, 'stop_reason': result.stop_reason.value,
                           'initial_loss': result.initial_loss, 'hidden': regressor_cfg.hidden,
                           'skip': regressor_cfg.skip})


@dataclass(frozen=True)
class TabularSettings:
    hidden: int = 16
    mlp_hidden: int = 32
    max_steps: Optional[int] = None


def fit_stacker(spec: StackerSpec,
                oof: Union[OofStore, OofArrays],
                task: ForecastTask,
                cfg: OptimConfig = OptimConfig(),
                folds: Optional[Sequence[int]] = None,
                tabular: TabularSettings = TabularSettings()) -> TrainedStacker:
    """Fit any stacker spec and record its wall time"""
    arrays = _as_arrays(oof, folds)
    started = time.perf_counter()
    family = spec.family

    if family == StackerFamily.MEAN:
        trained = fit_mean(arrays, task)
    elif family == StackerFamily.MEDIAN:
        trained = fit_median(arrays, task)
    elif family == StackerFamily.SELECT_BEST:
        trained = fit_select_best(arrays, task)
    elif family == StackerFamily.PERF_WEIGHTED:
        trained = fit_performance_weights(arrays, task, spec.h_kind)
    elif family == StackerFamily.GREEDY:
        trained = fit_greedy(arrays, task, spec.iterations)
    elif family == StackerFamily.LINEAR:
        trained = fit_linear(arrays, task, spec.tying, spec.param, cfg)
    else:
        regressor_cfg = RegressorConfig.for_spec(spec, tabular.hidden, tabular.mlp_hidden, tabular.max_steps)
        trained = fit_tabular(arrays, task, spec.scaled, regressor_cfg, cfg, regressor_kind=spec.regressor)

    trained.fit_time = time.perf_counter() - started
    logger.info(f"Fitted {spec.name} on {arrays.n_rows} windows in {trained.fit_time:.2f}s "
                f"(train loss {trained.train_loss:.4f})")
    return trained


def fit_stackers(specs: Sequence[StackerSpec],
                 oof: Union[OofStore, OofArrays],
                 task: ForecastTask,
                 cfg: OptimConfig = OptimConfig(),
                 folds: Optional[Sequence[int]] = None,
                 tabular: TabularSettings = TabularSettings(),
                 jobs: int = 1) -> List[TrainedStacker]:
    """Independent fits, returned in spec order regardless of jobs"""
    arrays = _as_arrays(oof, folds)
    if jobs <= 1 or len(specs) <= 1:
        return [fit_stacker(spec, arrays, task, cfg, tabular=tabular) for spec in specs]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fit_stacker, spec, arrays, task, cfg, None, tabular) for spec in specs]
        return [f.result() for f in futures]
