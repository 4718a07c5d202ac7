"""Tests for multi-layer stacking: the L2 stage, L3 aggregators, provenance audit and prediction"""

import numpy as np
import pytest

from stacking.cvharness import HOLDOUT_FOLD, backtest, holdout_split
from stacking.errors import InsufficientFolds
from stacking.multilayer import (
    DEFAULT_PORTFOLIO,
    MultiLayerEnsemble,
    MultiLayerSpec,
    assemble_multilayer,
    audit_two_level,
    fit_l2_stage,
    fit_multilayer,
    predict_multilayer,
    predict_multilayer_from_forecasts,
)
from stacking.stackers import StackerSpec

L2_NAMES = ("Median", "Greedy(S=5)", "Linear(mq, softmax)", "Linear(mi, positive)", "Tabular(scaled)")


@pytest.fixture
def l2_specs():
    return [StackerSpec.parse(name) for name in L2_NAMES]


@pytest.fixture
def stage(store, l2_specs, task, fast_cfg):
    return fit_l2_stage(store, l2_specs, task, fast_cfg)


class TestL2Stage:
    def test_interim_trained_before_window(self, stage, store):
        assert stage.interim_folds == [1, 2]
        assert stage.window_fold == 3
        assert stage.final_folds == [1, 2, 3]
        np.testing.assert_array_equal(stage.window_k.row_folds, [3] * len(store.forecasts[3].item_ids))
        assert list(stage.window_k.model_ids) == list(L2_NAMES)

    def test_window_predictions_shape(self, stage, task):
        assert stage.window_k.predictions.shape == (3, len(L2_NAMES), task.horizon, task.n_quantiles)

    def test_retrain_changes_final_fits(self, stage):
        interim = {ts.name: ts for ts in stage.interim}
        final = {ts.name: ts for ts in stage.final}
        linear = "Linear(mq, softmax)"
        assert not np.array_equal(interim[linear].weights.values, final[linear].weights.values)

    def test_no_retrain_reuses_interim(self, store, l2_specs, task, fast_cfg):
        stage = fit_l2_stage(store, l2_specs, task, fast_cfg, retrain_l2=False)
        assert stage.final is stage.interim
        assert stage.final_folds == stage.interim_folds

    def test_no_retrain_keeps_l3_and_saves_time(self, stage, store, l2_specs, task, fast_cfg):
        skipped = fit_l2_stage(store, l2_specs, task, fast_cfg, retrain_l2=False)
        with_retrain = assemble_multilayer(stage, task, "Greedy", 10)
        without = assemble_multilayer(skipped, task, "Greedy", 10)
        assert without.l3_weights() == with_retrain.l3_weights()
        assert without.fit_time < with_retrain.fit_time
        assert audit_two_level(without) == []

    def test_needs_two_folds(self, panel, learner_specs, task, l2_specs):
        single = backtest(panel, learner_specs, 1, task)
        with pytest.raises(InsufficientFolds):
            fit_l2_stage(single, l2_specs, task)


class TestAggregator:
    def test_select_best_picks_best_l2_on_window(self, stage, task):
        ensemble = assemble_multilayer(stage, task, "SelectBest")
        assert ensemble.l3.train_loss == min(stage.window_k_losses.values())
        weights = ensemble.l3_weights()
        assert sorted(weights.values()) == [0.0] * (len(L2_NAMES) - 1) + [1.0]

    def test_greedy_not_worse_than_best_l2(self, stage, task):
        ensemble = assemble_multilayer(stage, task, "Greedy", l3_iterations=20)
        assert ensemble.l3.train_loss <= min(stage.window_k_losses.values())
        assert sum(ensemble.l3_weights().values()) == pytest.approx(1.0)
        assert ensemble.name == "MultiLayer(Greedy)"

    def test_fit_time_adds_every_layer(self, stage, task):
        ensemble = assemble_multilayer(stage, task, "Greedy", l3_iterations=5)
        expected = (sum(ts.fit_time for ts in stage.interim) + ensemble.l3.fit_time
                    + sum(ts.fit_time for ts in stage.final))
        assert ensemble.fit_time == pytest.approx(expected)
        assert set(ensemble.provenance['fit_times']) == {'interim', 'final', 'l3'}

    def test_unknown_aggregator(self):
        with pytest.raises(ValueError):
            MultiLayerSpec(l3="Mean")
        with pytest.raises(InsufficientFolds):
            MultiLayerSpec(k_folds=1)


class TestAudit:
    def test_clean_fit_passes(self, stage, task):
        for l3 in ("SelectBest", "Greedy"):
            assert audit_two_level(assemble_multilayer(stage, task, l3, 5)) == []

    def test_window_in_interim_flagged(self, stage, task):
        ensemble = assemble_multilayer(stage, task, "Greedy", 5)
        ensemble.provenance['interim_folds'] = [1, 2, 3]
        assert audit_two_level(ensemble)

    def test_l3_rows_from_other_folds_flagged(self, stage, task):
        ensemble = assemble_multilayer(stage, task, "Greedy", 5)
        ensemble.provenance['l3_row_folds'] = [2, 3]
        violations = audit_two_level(ensemble)
        assert len(violations) == 1
        assert "L3 rows" in violations[0]

    def test_l3_started_early_flagged(self, stage, task):
        ensemble = assemble_multilayer(stage, task, "Greedy", 5)
        ensemble.provenance['l3_started'] = ensemble.provenance['interim_finished'] - 1.0
        assert audit_two_level(ensemble) == ["L3 fit started before all interim L2 fits finished"]


class TestPrediction:
    def test_from_learners_matches_holdout_forecasts(self, stage, store, panel, task):
        ensemble = assemble_multilayer(stage, task, "Greedy", 5, store)
        train_panel, _ = holdout_split(panel, task.horizon)
        from_learners = predict_multilayer(ensemble, train_panel, task)
        from_forecasts = predict_multilayer_from_forecasts(ensemble, store.forecasts[HOLDOUT_FOLD])
        for item_id in panel.item_ids:
            np.testing.assert_allclose(from_learners[item_id].values, from_forecasts[item_id].values)
            assert np.all(np.diff(from_forecasts[item_id].values, axis=1) >= 0)
            assert from_forecasts[item_id].origin_t == len(train_panel.get(item_id))

    def test_dict_roundtrip_predicts_identically(self, stage, store, task):
        ensemble = assemble_multilayer(stage, task, "SelectBest", 5)
        restored = MultiLayerEnsemble.from_dict(ensemble.to_dict())
        holdout = store.forecasts[HOLDOUT_FOLD]
        first = predict_multilayer_from_forecasts(ensemble, holdout)
        second = predict_multilayer_from_forecasts(restored, holdout)
        for item_id in first:
            np.testing.assert_array_equal(first[item_id].values, second[item_id].values)
        assert restored.l3_weights() == ensemble.l3_weights()


class TestFitMultilayer:
    def test_end_to_end_from_panel(self, panel, learner_specs, task, fast_cfg):
        spec = MultiLayerSpec(l2=tuple(StackerSpec.parse(n) for n in ("Median", "Greedy(S=5)")),
                              l3="Greedy", l3_iterations=5, k_folds=3, l1=tuple(learner_specs))
        train_panel, _ = holdout_split(panel, task.horizon)
        ensemble = fit_multilayer(train_panel, spec, task, cfg=fast_cfg)
        assert ensemble.l2_names == ["Median", "Greedy(S=5)"]
        assert audit_two_level(ensemble) == []
        forecasts = predict_multilayer(ensemble, train_panel, task)
        assert set(forecasts) == set(panel.item_ids)

    def test_default_portfolio_parses(self):
        spec = MultiLayerSpec()
        assert len(spec.l2) == len(DEFAULT_PORTFOLIO) == 14
        assert [s.name for s in spec.l2] == list(DEFAULT_PORTFOLIO)
