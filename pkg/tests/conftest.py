"""Shared fixtures: small panels, tasks, random OOF windows and a built store"""

from pathlib import Path
import sys

import numpy as np
import pandas as pd
import pytest

# Add project root to Python path
project_root = Path(__file__).parent.parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

from stacking.baselearners import BaseLearnerSpec, LearnerKind
from stacking.core import ForecastTask, TimeSeries, TimeSeriesPanel
from stacking.cvharness import OofArrays, backtest
from stacking.optim import OptimConfig


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running study and end-to-end checks")


def make_panel(lengths, seasonality=2, seed=0, name="toy"):
    rng = np.random.default_rng(seed)
    series = []
    for n, length in enumerate(lengths):
        t = np.arange(length)
        values = 20.0 + 0.3 * t + 3.0 * np.sin(2 * np.pi * t / max(seasonality, 2)) + rng.normal(0, 1, length)
        series.append(TimeSeries(f"item_{n}", values, pd.Timestamp("2020-01-01"), pd.Timedelta(days=1)))
    return TimeSeriesPanel(tuple(series), seasonality, "D", name)


def random_arrays(rng, n_rows=6, n_models=3, horizon=2, levels=(0.1, 0.5, 0.9), n_items=None, folds=None):
    """Random OOF windows with sorted quantiles and positive scales"""
    n_items = n_items or n_rows
    predictions = np.sort(rng.normal(10.0, 2.0, (n_rows, n_models, horizon, len(levels))), axis=-1)
    targets = rng.normal(10.0, 2.0, (n_rows, horizon))
    scales = rng.uniform(0.5, 2.0, n_rows)
    row_items = [f"item_{r % n_items}" for r in range(n_rows)]
    row_folds = np.asarray(folds if folds is not None else [1 + r // n_items for r in range(n_rows)], dtype=int)
    model_ids = tuple(f"model_{m}" for m in range(n_models))
    return OofArrays(predictions, targets, scales, row_items, row_folds, model_ids, tuple(levels))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def task():
    return ForecastTask(2, (0.1, 0.5, 0.9), "SQL")


@pytest.fixture
def panel():
    return make_panel([30, 28, 26])


@pytest.fixture
def learner_specs():
    return [BaseLearnerSpec(kind) for kind in
            (LearnerKind.SEASONAL_NAIVE, LearnerKind.SES, LearnerKind.THETA, LearnerKind.LINEAR_AR)]


@pytest.fixture
def fast_cfg():
    return OptimConfig(max_steps=200, plateau_patience=20)


@pytest.fixture
def store(panel, learner_specs, task):
    return backtest(panel, learner_specs, 3, task, seed=0)
