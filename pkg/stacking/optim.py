"""
Stackcast Optimizer
Full-batch Adam with a plateau learning-rate schedule, best-iterate tracking and a wall-clock budget
"""

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Mapping, Sequence, Tuple
import logging
import time

import numpy as np

from stacking.errors import NonFiniteGradient, NonFiniteLoss

logger = logging.getLogger(__name__)

Objective = Callable[[np.ndarray], Tuple[float, np.ndarray]]


class StopReason(str, Enum):
    CONVERGED = "Converged"
    MAX_STEPS = "MaxSteps"
    TIME_LIMIT = "TimeLimit"


@dataclass(frozen=True)
class OptimConfig:
    """Adam hyperparameters plus the plateau schedule and stopping budget"""
    lr0: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    plateau_patience: int = 50
    plateau_factor: float = 0.5
    rel_tol: float = 1e-4
    max_steps: int = 5000
    time_limit: float = 600.0
    min_lr_ratio: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be positive, got {self.lr0}")
        if not (0.0 < self.plateau_factor < 1.0):
            raise ValueError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.time_limit <= 0:
            raise ValueError(f"time_limit must be positive, got {self.time_limit}")
        if self.plateau_patience < 1 or self.max_steps < 0:
            raise ValueError("plateau_patience must be >= 1 and max_steps >= 0")

    def with_overrides(self, **overrides) -> 'OptimConfig':
        """Copy with the non-None overrides applied"""
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    @classmethod
    def from_dict(cls, data: Mapping) -> 'OptimConfig':
        known = {k: v for k, v in (data or {}).items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def to_dict(self) -> Dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}


@dataclass
class OptimResult:
    best_params: np.ndarray
    best_loss: float
    initial_loss: float
    steps_taken: int
    stop_reason: StopReason
    lr_trace: List[float] = field(default_factory=list)
    loss_trace: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        return {
            'best_loss': self.best_loss,
            'initial_loss': self.initial_loss,
            'steps_taken': self.steps_taken,
            'stop_reason': self.stop_reason.value,
            'final_lr': self.lr_trace[-1] if self.lr_trace else None
        }


def _evaluate(objective: Objective, params: np.ndarray, step: int) -> Tuple[float, np.ndarray]:
    loss, grad = objective(params)
    loss = float(loss)
    if not np.isfinite(loss):
        raise NonFiniteLoss(step)
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NonFiniteGradient(step)
    return loss, grad


def minimize(objective: Objective,
             init: np.ndarray,
             cfg: OptimConfig = OptimConfig(),
             clock: Callable[[], float] = time.perf_counter) -> OptimResult:
    """
    Run Adam on a full-batch objective returning (loss, gradient)

    The best iterate seen so far is returned, so best_loss never exceeds the
    loss at init. The learning rate is multiplied by plateau_factor whenever
    plateau_patience consecutive steps fail to improve the best loss by rel_tol
    (relative).

    Raises:
        NonFiniteLoss, NonFiniteGradient
    """
    started = clock()
    params = np.array(init, dtype=np.float64, copy=True)
    loss, grad = _evaluate(objective, params, 0)

    best_loss = initial_loss = loss
    best_params = params.copy()
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    lr = cfg.lr0
    wait = 0
    lr_trace: List[float] = []
    loss_trace: List[float] = [loss]
    stop_reason = StopReason.MAX_STEPS
    steps = 0

    for step in range(1, cfg.max_steps + 1):
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad * grad
        m_hat = m / (1.0 - cfg.beta1 ** step)
        v_hat = v / (1.0 - cfg.beta2 ** step)
        params = params - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)

        loss, grad = _evaluate(objective, params, step)
        steps = step
        lr_trace.append(lr)
        loss_trace.append(loss)

        if loss < best_loss - cfg.rel_tol * abs(best_loss):
            wait = 0
        else:
            wait += 1
        if loss < best_loss:
            best_loss = loss
            best_params = params.copy()

        if wait >= cfg.plateau_patience:
            lr *= cfg.plateau_factor
            wait = 0
            logger.debug(f"Plateau at step {step}: lr reduced to {lr:.3g}")
            if lr < cfg.min_lr_ratio * cfg.lr0:
                stop_reason = StopReason.CONVERGED
                break

        if clock() - started >= cfg.time_limit:
            stop_reason = StopReason.TIME_LIMIT
            break

    logger.debug(
        f"Adam stopped after {steps} steps ({stop_reason.value}): "
        f"loss {initial_loss:.6g} -> {best_loss:.6g}"
    )
    return OptimResult(best_params, best_loss, initial_loss, steps, stop_reason, lr_trace, loss_trace)


def check_gradient(objective: Objective, params: np.ndarray, h: float = 1e-5) -> float:
    """
    Compare the analytic gradient with central finite differences

    Returns:
        max over coordinates of |g_fd - g| / (|g| + 1e-8), g the analytic gradient
    """
    params = np.array(params, dtype=np.float64, copy=True)
    _, analytic = objective(params)
    analytic = np.asarray(analytic, dtype=np.float64).ravel()

    flat = params.ravel()
    numeric = np.empty_like(flat)
    for idx in range(flat.size):
        step = np.zeros_like(flat)
        step[idx] = h
        up, _ = objective((flat + step).reshape(params.shape))
        down, _ = objective((flat - step).reshape(params.shape))
        numeric[idx] = (up - down) / (2.0 * h)

    return float(np.max(np.abs(numeric - analytic) / (np.abs(analytic) + 1e-8)))


class ParamPacker:
    """Flattens named parameter arrays into one vector for minimize and back"""

    def __init__(self, shapes: Mapping[str, Sequence[int]]):
        self.names = list(shapes)
        self.shapes = {name: tuple(shape) for name, shape in shapes.items()}
        self.sizes = {name: int(np.prod(shape)) for name, shape in self.shapes.items()}

    @property
    def size(self) -> int:
        return sum(self.sizes.values())

    def pack(self, arrays: Mapping[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(arrays[name], dtype=np.float64).ravel() for name in self.names])

    def unpack(self, vector: np.ndarray) -> Dict[str, np.ndarray]:
        arrays = {}
        offset = 0
        for name in self.names:
            size = self.sizes[name]
            arrays[name] = vector[offset:offset + size].reshape(self.shapes[name])
            offset += size
        return arrays
