"""Tests for core types, panel validation, length filtering and quantile hygiene"""

import numpy as np
import pandas as pd
import pytest

from stacking.core import (
    ForecastTask,
    ModelForecastSet,
    QuantileForecast,
    TimeSeries,
    TimeSeriesPanel,
    enforce_quantile_monotonicity,
    filter_min_length,
    validate_panel,
)
from stacking.errors import (
    DuplicateItemId,
    EmptyAfterFilter,
    EmptySeries,
    InvalidTask,
    NonFiniteValue,
    ShapeMismatch,
)


def _panel(*series):
    return TimeSeriesPanel(tuple(series), 1)


class TestValidatePanel:
    def test_valid_panel_returned_unchanged(self):
        panel = _panel(TimeSeries("a", [1.0, 2.0, 3.0]))
        assert validate_panel(panel) is panel

    def test_idempotent(self):
        panel = _panel(TimeSeries("a", [1.0, 2.0]), TimeSeries("b", [3.0]))
        assert validate_panel(validate_panel(panel)) is panel

    def test_nan_reports_item_and_index(self):
        with pytest.raises(NonFiniteValue) as err:
            validate_panel(_panel(TimeSeries("a", [1.0, np.nan])))
        assert err.value.item_id == "a"
        assert err.value.index == 1

    def test_inf_rejected(self):
        with pytest.raises(NonFiniteValue):
            validate_panel(_panel(TimeSeries("a", [np.inf])))

    def test_duplicate_ids(self):
        with pytest.raises(DuplicateItemId):
            validate_panel(_panel(TimeSeries("a", [1.0]), TimeSeries("a", [2.0])))

    def test_empty_series(self):
        with pytest.raises(EmptySeries):
            validate_panel(_panel(TimeSeries("a", [])))

    def test_errors_are_value_errors(self):
        with pytest.raises(ValueError):
            validate_panel(_panel(TimeSeries("a", [np.nan])))


class TestFilterMinLength:
    def test_keeps_series_with_at_least_8h(self):
        panel = _panel(TimeSeries("long", np.ones(16)), TimeSeries("short", np.ones(15)))
        kept = filter_min_length(panel, 2)
        assert kept.item_ids == ["long"]

    def test_identity_when_all_long_enough(self):
        panel = _panel(TimeSeries("a", np.ones(20)), TimeSeries("b", np.ones(16)))
        assert filter_min_length(panel, 2).item_ids == ["a", "b"]

    def test_all_short_raises(self):
        with pytest.raises(EmptyAfterFilter):
            filter_min_length(_panel(TimeSeries("a", np.ones(3))), 2)

    def test_random_panels_sub_multiset_with_order(self, rng):
        for _ in range(25):
            lengths = rng.integers(1, 40, size=8)
            panel = _panel(*[TimeSeries(f"s{n}", np.ones(length)) for n, length in enumerate(lengths)])
            horizon = int(rng.integers(1, 4))
            if lengths.max() < 8 * horizon:
                continue
            kept = filter_min_length(panel, horizon)
            assert all(len(s) >= 8 * horizon for s in kept)
            expected = [s.item_id for s in panel if len(s) >= 8 * horizon]
            assert kept.item_ids == expected

    def test_custom_factor(self):
        panel = _panel(TimeSeries("a", np.ones(6)))
        assert filter_min_length(panel, 2, factor=3).item_ids == ["a"]


class TestQuantileMonotonicity:
    def test_sorted_rows_unchanged(self):
        fc = QuantileForecast("a", 3, [[1.0, 2.0, 3.0]])
        assert enforce_quantile_monotonicity(fc) is fc

    def test_crossing_rows_sorted(self):
        fc = enforce_quantile_monotonicity(QuantileForecast("a", 3, [[3.0, 1.0, 2.0], [2.0, 2.0, 2.0]]))
        np.testing.assert_array_equal(fc.values, [[1.0, 2.0, 3.0], [2.0, 2.0, 2.0]])

    def test_idempotent_and_multiset_preserving(self, rng):
        values = rng.normal(size=(5, 4))
        once = enforce_quantile_monotonicity(QuantileForecast("a", 0, values))
        twice = enforce_quantile_monotonicity(once)
        np.testing.assert_array_equal(once.values, twice.values)
        np.testing.assert_array_equal(np.sort(values, axis=1), once.values)
        assert np.all(np.diff(once.values, axis=1) >= 0)


class TestForecastTask:
    def test_defaults(self):
        task = ForecastTask(3)
        assert task.n_quantiles == 9
        assert task.median_index == 4

    @pytest.mark.parametrize("levels", [(0.5, 0.1), (0.0, 0.5), (0.5, 1.0), (0.2, 0.2)])
    def test_invalid_levels(self, levels):
        with pytest.raises(InvalidTask):
            ForecastTask(2, levels)

    def test_mase_requires_median(self):
        with pytest.raises(InvalidTask):
            ForecastTask(2, (0.1, 0.9), "MASE")

    def test_horizon_positive(self):
        with pytest.raises(InvalidTask):
            ForecastTask(0)


class TestModelForecastSet:
    def _set(self):
        forecasts = {
            m: {i: QuantileForecast(i, 5, np.full((2, 3), k + j)) for j, i in enumerate(("x", "y"))}
            for k, m in enumerate(("A", "B"))
        }
        return ModelForecastSet(("A", "B"), forecasts)

    def test_to_array_layout(self):
        array = self._set().to_array()
        assert array.shape == (2, 2, 2, 3)
        assert array[1, 0, 0, 0] == 1.0  # item y, model A
        assert array[0, 1, 0, 0] == 1.0  # item x, model B

    def test_from_array_inverse(self):
        mfs = self._set()
        rebuilt = ModelForecastSet.from_array(mfs.model_ids, mfs.item_ids, [5, 5], mfs.to_array())
        np.testing.assert_array_equal(rebuilt.to_array(), mfs.to_array())

    def test_mismatched_items_rejected(self):
        forecasts = {"A": {"x": QuantileForecast("x", 1, np.zeros((1, 1)))},
                     "B": {"y": QuantileForecast("y", 1, np.zeros((1, 1)))}}
        with pytest.raises(ShapeMismatch):
            ModelForecastSet(("A", "B"), forecasts)

    def test_timestamps_from_start_and_step(self):
        series = TimeSeries("a", [1.0, 2.0, 3.0], pd.Timestamp("2021-01-01"), pd.Timedelta(hours=1))
        assert series.timestamps()[-1] == pd.Timestamp("2021-01-01 02:00")
