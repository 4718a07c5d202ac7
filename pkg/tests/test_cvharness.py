"""Tests for fold algebra, OOF construction, holdout forecasts and the leakage audit"""

import numpy as np
import pytest

from stacking.core import ForecastTask, QuantileForecast
from stacking.cvharness import (
    HOLDOUT_FOLD,
    FoldWindow,
    build_oof,
    holdout_split,
    leakage_check,
    split_folds,
)
from stacking.errors import InsufficientLength

from tests.conftest import make_panel


class TestSplitFolds:
    @pytest.mark.parametrize("horizon", [1, 2, 4])
    @pytest.mark.parametrize("factor", [8, 9, 10, 11, 12])
    @pytest.mark.parametrize("k_folds", [1, 2, 3, 4, 5])
    def test_windows_tile_the_tail(self, horizon, factor, k_folds):
        length = factor * horizon
        plan = split_folds(length, k_folds, horizon, min_train=1)
        assert len(plan.windows) == k_folds

        for k, window in enumerate(plan.windows, start=1):
            j = k_folds - k + 1
            assert window.fold == k
            assert window.train_end == length - j * horizon
            assert window.val_start == window.train_end + 1
            assert window.size == horizon

        covered = np.concatenate([np.arange(w.val_start, w.val_end + 1) for w in plan.windows])
        np.testing.assert_array_equal(covered, np.arange(length - k_folds * horizon + 1, length + 1))
        assert plan.windows[-1].val_end == length

    def test_train_prefixes_grow(self):
        plan = split_folds(40, 4, 3)
        ends = [w.train_end for w in plan.windows]
        assert ends == sorted(ends)
        assert plan.window(1).train_end == 28

    def test_too_short(self):
        with pytest.raises(InsufficientLength):
            split_folds(10, 3, 3, min_train=4)

    @pytest.mark.parametrize("k_folds, horizon", [(0, 2), (2, 0)])
    def test_invalid_counts(self, k_folds, horizon):
        with pytest.raises(InsufficientLength):
            split_folds(50, k_folds, horizon)


class TestHoldoutSplit:
    def test_reserves_last_h(self):
        panel = make_panel([20, 18])
        train, test = holdout_split(panel, 3)
        assert train.lengths() == {"item_0": 17, "item_1": 15}
        np.testing.assert_array_equal(test["item_0"], panel.get("item_0").values[-3:])

    def test_series_not_longer_than_h(self):
        with pytest.raises(InsufficientLength):
            holdout_split(make_panel([3]), 3)


class TestBuildOof:
    def test_origins_and_targets(self, panel, learner_specs, task):
        store = build_oof(panel, learner_specs, 3, task)
        assert store.folds == [1, 2, 3]
        for k in store.folds:
            j = 3 - k + 1
            fold_set = store.forecasts[k]
            for item_id in fold_set.item_ids:
                series = panel.get(item_id)
                train_end = len(series) - j * task.horizon
                assert fold_set.origin(item_id) == train_end
                np.testing.assert_array_equal(store.targets[k][item_id],
                                              series.values[train_end:train_end + task.horizon])
                assert store.scales[k][item_id] > 0

    def test_deterministic(self, panel, learner_specs, task):
        first = build_oof(panel, learner_specs, 2, task, seed=3)
        second = build_oof(panel, learner_specs, 2, task, seed=3)
        np.testing.assert_array_equal(first.to_arrays().predictions, second.to_arrays().predictions)

    def test_parallel_matches_serial(self, panel, learner_specs, task):
        serial = build_oof(panel, learner_specs, 2, task)
        parallel = build_oof(panel, learner_specs, 2, task, jobs=4)
        np.testing.assert_array_equal(serial.to_arrays().predictions, parallel.to_arrays().predictions)

    def test_short_items_skipped_per_fold(self, learner_specs, task):
        panel = make_panel([30, 12])
        store = build_oof(panel, learner_specs, 3, task, min_train=6)
        # item_1: train_end = 12 - 2j -> 6, 8, 10 for folds 1..3
        assert store.skipped[1] == []
        store = build_oof(panel, learner_specs, 3, task, min_train=7)
        assert store.skipped[1] == ["item_1"]
        assert store.skipped[2] == []
        assert "item_1" not in store.forecasts[1].item_ids
        assert "item_1" in store.forecasts[3].item_ids

    def test_min_train_raised_above_seasonality(self, learner_specs, task):
        panel = make_panel([30, 10], seasonality=4)
        # item_1: train_end = 4, 6, 8; a 4-point prefix has no lag-4 seasonal error
        store = build_oof(panel, learner_specs, 3, task, min_train=2)
        assert store.skipped[1] == ["item_1"]
        assert store.skipped[2] == []
        assert all(scale > 0 for fold in store.scales.values() for scale in fold.values())

    def test_record_count(self, panel, learner_specs, task):
        store = build_oof(panel, learner_specs, 3, task)
        assert store.n_records(1) == len(learner_specs) * len(panel)

    def test_arrays_rows_ordered_by_fold(self, store):
        arrays = store.to_arrays()
        assert arrays.n_rows == 3 * 3
        np.testing.assert_array_equal(arrays.row_folds, [1, 1, 1, 2, 2, 2, 3, 3, 3])
        assert arrays.predictions.shape == (9, 4, 2, 3)
        assert arrays.select_folds([2]).n_rows == 3

    def test_last_fold_learners_kept(self, store, learner_specs, panel):
        assert set(store.learners) == {s.name for s in learner_specs}
        assert set(store.learners["SES"]) == set(panel.item_ids)


class TestHoldout:
    def test_holdout_forecasts_start_after_training(self, store, panel, task):
        assert store.has_holdout
        assert HOLDOUT_FOLD not in store.folds
        holdout = store.forecasts[HOLDOUT_FOLD]
        for item_id in panel.item_ids:
            assert holdout.origin(item_id) == len(panel.get(item_id)) - task.horizon
            np.testing.assert_array_equal(store.targets[HOLDOUT_FOLD][item_id],
                                          panel.get(item_id).values[-task.horizon:])

    def test_holdout_arrays(self, store):
        arrays = store.holdout_arrays()
        np.testing.assert_array_equal(arrays.row_folds, [0, 0, 0])


class TestLeakageCheck:
    def test_clean_store(self, store):
        assert leakage_check(store) == []

    def test_origin_inside_window(self, store):
        fold_set = store.forecasts[2]
        model = fold_set.model_ids[0]
        item_id = fold_set.item_ids[0]
        bad = fold_set.forecasts[model][item_id]
        fold_set.forecasts[model][item_id] = QuantileForecast(item_id, bad.origin_t + 1, bad.values)

        violations = leakage_check(store)
        assert len(violations) == 1
        assert (violations[0].fold, violations[0].model, violations[0].item_id) == (2, model, item_id)

    def test_wrong_window_size(self, store):
        item_id = store.forecasts[1].item_ids[0]
        window = store.windows[1][item_id]
        store.windows[1][item_id] = FoldWindow(1, window.train_end, window.val_start, window.val_end + 1)
        violations = leakage_check(store)
        assert violations
        assert all(v.item_id == item_id for v in violations)

    def test_missing_window_reported(self, store):
        item_id = store.forecasts[1].item_ids[0]
        del store.windows[1][item_id]
        assert any("no window" in v.reason for v in leakage_check(store))
