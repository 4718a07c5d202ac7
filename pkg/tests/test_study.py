"""Directional study on synthetic datasets: stacking against simple averaging"""

import numpy as np
import pytest

from stacking.baselearners import BaseLearnerSpec, LearnerKind
from stacking.core import ForecastTask
from stacking.cvharness import HOLDOUT_FOLD, backtest
from stacking.evalreport import EvalRecord, avg_rank
from stacking.losses import batch_loss
from stacking.multilayer import DEFAULT_PORTFOLIO, assemble_multilayer, fit_l2_stage, predict_multilayer_from_forecasts
from stacking.optim import OptimConfig
from stacking.stackers import StackerSpec, TabularSettings, combine_arrays, fit_stackers
from utils.synthetic import generate_study

REPRESENTATIVES = ("Median", "SelectBest", "PerfWeighted(exp)", "Greedy(S=100)",
                   "Linear(mq, softmax)", "Tabular(scaled)")
MULTILAYER = ("SelectBest", "Greedy")


def _holdout_losses(panel, task, cfg, tabular):
    learners = [BaseLearnerSpec(kind) for kind in
                (LearnerKind.SEASONAL_NAIVE, LearnerKind.SES, LearnerKind.THETA, LearnerKind.LINEAR_AR)]
    store = backtest(panel, learners, 5, task, seed=0)
    holdout = store.holdout_arrays()

    def score(predictions):
        return batch_loss(predictions, holdout.targets, holdout.scales, task)

    losses = {}
    for trained in fit_stackers([StackerSpec.parse(n) for n in REPRESENTATIVES], store, task, cfg, tabular=tabular):
        losses[trained.name] = score(combine_arrays(trained, holdout.predictions, holdout.row_items))

    stage = fit_l2_stage(store, [StackerSpec.parse(n) for n in DEFAULT_PORTFOLIO], task, cfg, tabular)
    for l3 in MULTILAYER:
        ensemble = assemble_multilayer(stage, task, l3, 100, store)
        forecasts = predict_multilayer_from_forecasts(ensemble, store.forecasts[HOLDOUT_FOLD])
        losses[ensemble.name] = score(np.stack([forecasts[item].values for item in holdout.row_items]))
    return losses


@pytest.mark.slow
class TestDirectionalStudy:
    @pytest.fixture(scope="class")
    def study(self):
        task = ForecastTask(4)
        cfg = OptimConfig(max_steps=300, plateau_patience=20)
        tabular = TabularSettings(max_steps=300)
        return {panel.name: _holdout_losses(panel, task, cfg, tabular)
                for panel in generate_study(n_datasets=10, n_items=20, horizon=4, seasonality=4, seed=0)}

    def test_stackers_beat_median_average(self, study):
        for method in ("Greedy(S=100)", "Linear(mq, softmax)"):
            wins = sum(losses[method] < losses["Median"] for losses in study.values())
            assert wins >= 7, f"{method} beat Median on {wins} of {len(study)} datasets"

    def test_multilayer_rank_close_to_best_category(self, study):
        records = [EvalRecord(method, dataset, "SQL", value)
                   for dataset, losses in study.items() for method, value in losses.items()]
        ranks = avg_rank(records)
        single = ranks[[m for m in ranks.index if not m.startswith("MultiLayer")]]
        assert ranks["MultiLayer(Greedy)"] <= single.min() + 0.5
