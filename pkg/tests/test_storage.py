"""Tests for on-disk formats: CSV ingestion, panels, OOF stores, stackers, ensembles and records"""

import numpy as np
import pandas as pd
import pytest

from stacking.cvharness import HOLDOUT_FOLD, backtest
from stacking.errors import IrregularSpacing, ParseError, SchemaMismatch, UnknownSchemaVersion
from stacking.evalreport import EvalRecord
from stacking.multilayer import assemble_multilayer, fit_l2_stage
from stacking.stackers import StackerSpec, fit_stacker
from utils import storage

from tests.conftest import make_panel


def _write(path, lines):
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


class TestIngest:
    def test_parses_and_sorts(self, tmp_path):
        path = _write(tmp_path / "sales.csv", [
            "item_id,timestamp,target",
            "b,2021-01-02,5",
            "a,2021-01-03,3.5",
            "a,2021-01-01,1.5",
            "b,2021-01-01,4",
            "a,2021-01-02,2.5",
        ])
        panel = storage.ingest_csv(path, seasonality=2)
        assert panel.item_ids == ["b", "a"]
        assert panel.name == "sales"
        np.testing.assert_array_equal(panel.get("a").values, [1.5, 2.5, 3.5])
        assert panel.get("a").start_time == pd.Timestamp("2021-01-01")
        assert panel.get("a").step == pd.Timedelta(days=1)

    def test_bad_value_reports_line(self, tmp_path):
        path = _write(tmp_path / "bad.csv", [
            "item_id,timestamp,target",
            "a,2021-01-01,1.0",
            "a,2021-01-02,abc",
        ])
        with pytest.raises(ParseError) as err:
            storage.ingest_csv(path)
        assert err.value.line == 3

    def test_bad_timestamp_reports_line(self, tmp_path):
        path = _write(tmp_path / "bad.csv", [
            "item_id,timestamp,target",
            "a,2021-01-01,1.0",
            "a,2021-01-02,2.0",
            "a,not-a-date,3.0",
        ])
        with pytest.raises(ParseError) as err:
            storage.ingest_csv(path)
        assert err.value.line == 4

    def test_extra_field_reports_line(self, tmp_path):
        path = _write(tmp_path / "bad.csv", [
            "item_id,timestamp,target",
            "a,2021-01-01,1.0",
            "a,2021-01-02,2.0",
            "a,2021-01-03,3.0,9",
        ])
        with pytest.raises(ParseError) as err:
            storage.ingest_csv(path)
        assert err.value.line == 4

    def test_irregular_spacing(self, tmp_path):
        path = _write(tmp_path / "gaps.csv", [
            "item_id,timestamp,target",
            "a,2021-01-01,1.0",
            "a,2021-01-02,2.0",
            "a,2021-01-04,3.0",
        ])
        with pytest.raises(IrregularSpacing) as err:
            storage.ingest_csv(path)
        assert err.value.item_id == "a"

    def test_missing_column(self, tmp_path):
        path = _write(tmp_path / "cols.csv", ["item_id,date,target", "a,2021-01-01,1.0"])
        with pytest.raises(SchemaMismatch):
            storage.ingest_csv(path)


class TestPanelFiles:
    def test_roundtrip(self, tmp_path):
        panel = make_panel([20, 15], seasonality=3, name="toy")
        storage.save_panel(panel, tmp_path / "panel.csv")
        loaded = storage.load_panel(tmp_path / "panel.csv")
        assert loaded.item_ids == panel.item_ids
        assert (loaded.name, loaded.seasonality_m, loaded.freq_label) == ("toy", 3, "D")
        for series in panel:
            restored = loaded.get(series.item_id)
            np.testing.assert_allclose(restored.values, series.values, rtol=1e-15)
            assert restored.start_time == series.start_time
            assert restored.step == series.step

    def test_reingest_is_idempotent(self, tmp_path):
        panel = make_panel([12, 10])
        storage.save_panel(panel, tmp_path / "panel.csv")
        first = storage.ingest_csv(tmp_path / "panel.csv", seasonality=2, name="toy", freq_label="D")
        storage.save_panel(first, tmp_path / "again.csv")
        second = storage.ingest_csv(tmp_path / "again.csv", seasonality=2, name="toy", freq_label="D")
        assert (tmp_path / "panel.csv").read_bytes() == (tmp_path / "again.csv").read_bytes()
        for series in first:
            np.testing.assert_array_equal(second.get(series.item_id).values, series.values)

    def test_schema_line_required(self, tmp_path):
        _write(tmp_path / "panel.csv", ["item_id,timestamp,target", "a,2021-01-01,1.0"])
        with pytest.raises(UnknownSchemaVersion):
            storage.load_panel(tmp_path / "panel.csv")

    def test_unknown_version(self, tmp_path):
        panel = make_panel([10])
        storage.save_panel(panel, tmp_path / "panel.csv")
        text = (tmp_path / "panel.csv").read_text(encoding="utf-8").replace("panel/v1", "panel/v9", 1)
        (tmp_path / "panel.csv").write_text(text, encoding="utf-8")
        with pytest.raises(UnknownSchemaVersion) as err:
            storage.load_panel(tmp_path / "panel.csv")
        assert err.value.found == "panel/v9"

    def test_header_roundtrip(self):
        line = storage.format_header("panel", {'name': "toy", 'seasonality': 7})
        assert line == "#schema=panel/v1;name=toy;seasonality=7"
        assert storage.parse_header(line) == ("panel", "v1", {'name': "toy", 'seasonality': "7"})


class TestStoreFiles:
    def test_bit_exact_roundtrip(self, store, tmp_path):
        storage.save_store(store, tmp_path, record_fit_times=True)
        loaded = storage.load_store(tmp_path)

        assert loaded.model_ids == store.model_ids
        assert loaded.quantile_levels == store.quantile_levels
        assert loaded.folds == store.folds
        assert loaded.has_holdout
        for folds in (None, [HOLDOUT_FOLD]):
            expected, actual = store.to_arrays(folds), loaded.to_arrays(folds)
            np.testing.assert_array_equal(actual.predictions, expected.predictions)
            np.testing.assert_array_equal(actual.targets, expected.targets)
            np.testing.assert_array_equal(actual.scales, expected.scales)
            assert actual.row_items == expected.row_items
        assert loaded.windows == store.windows
        assert loaded.fit_times == store.fit_times
        for k in store.forecasts:
            for item_id in store.forecasts[k].item_ids:
                assert loaded.forecasts[k].origin(item_id) == store.forecasts[k].origin(item_id)

    def test_reruns_are_byte_identical(self, panel, learner_specs, task, tmp_path):
        for name in ("first", "second"):
            storage.save_store(backtest(panel, learner_specs, 3, task, seed=0), tmp_path / name)
        first = sorted(p.relative_to(tmp_path / "first") for p in (tmp_path / "first").rglob("*") if p.is_file())
        second = sorted(p.relative_to(tmp_path / "second") for p in (tmp_path / "second").rglob("*") if p.is_file())
        assert first == second
        for rel in first:
            assert (tmp_path / "first" / rel).read_bytes() == (tmp_path / "second" / rel).read_bytes()

    def test_fold_file_layout(self, store, tmp_path):
        storage.save_store(store, tmp_path)
        names = sorted(p.name for p in (tmp_path / "oof").iterdir())
        assert names == ["fold_1.csv", "fold_2.csv", "fold_3.csv", "holdout.csv",
                         "meta.yml", "scales.csv", "targets.csv"]
        records = storage.read_forecast_records(tmp_path / "oof" / "fold_1.csv")
        assert len(records) == store.n_records(1) * store.horizon * len(store.quantile_levels)
        assert list(records.columns) == storage.FORECAST_COLUMNS

    def test_meta_version_checked(self, store, tmp_path):
        storage.save_store(store, tmp_path)
        meta = tmp_path / "oof" / "meta.yml"
        meta.write_text(meta.read_text(encoding="utf-8").replace("oof-meta/v1", "oof-meta/v2", 1), encoding="utf-8")
        with pytest.raises(UnknownSchemaVersion):
            storage.load_store(tmp_path)


class TestModelFiles:
    def test_stacker_roundtrip(self, store, task, fast_cfg, tmp_path):
        arrays = store.to_arrays()
        trained = fit_stacker(StackerSpec.parse("Linear(miq, softmax)"), store, task, fast_cfg)
        storage.save_stacker(trained, tmp_path / "stacker.json", record_fit_times=True)
        restored = storage.load_stacker(tmp_path / "stacker.json")
        assert restored.name == trained.name
        assert restored.fit_time == trained.fit_time
        np.testing.assert_array_equal(restored.predict_array(arrays.predictions, arrays.row_items),
                                      trained.predict_array(arrays.predictions, arrays.row_items))

    def test_fit_times_scrubbed(self, store, task, tmp_path):
        trained = fit_stacker(StackerSpec.parse("Greedy(S=5)"), store, task)
        storage.save_stacker(trained, tmp_path / "stacker.json", record_fit_times=False)
        assert storage.load_stacker(tmp_path / "stacker.json").fit_time == 0.0
        assert (tmp_path / "stacker.json").read_text(encoding="utf-8").startswith("#schema=stacker/v1\n")

    def test_scrub_times_nested(self):
        data = {'fit_time': 3.2, 'name': "x", 'provenance': {'fit_times': {'interim': {'a': 1.0}, 'l3': 2.0},
                                                            'l3_started': 99.0, 'window_fold': 5}}
        scrubbed = storage.scrub_times(data)
        assert scrubbed['fit_time'] == 0.0
        assert scrubbed['provenance']['fit_times'] == {'interim': {'a': 0.0}, 'l3': 0.0}
        assert scrubbed['provenance']['l3_started'] == 0.0
        assert scrubbed['provenance']['window_fold'] == 5

    def test_ensemble_roundtrip(self, store, task, fast_cfg, tmp_path):
        stage = fit_l2_stage(store, [StackerSpec.parse(n) for n in ("Median", "Linear(mq, softmax)")], task, fast_cfg)
        ensemble = assemble_multilayer(stage, task, "Greedy", 5)
        storage.save_ensemble(ensemble, tmp_path / "greedy.json", record_fit_times=False)
        restored = storage.load_ensemble(tmp_path / "greedy.json")
        assert restored.name == "MultiLayer(Greedy)"
        assert restored.l3_weights() == ensemble.l3_weights()
        assert restored.provenance['window_fold'] == 3


class TestRecordFiles:
    def test_merge_replaces_same_key(self, tmp_path):
        path = tmp_path / "records.csv"
        storage.merge_records(path, [EvalRecord("A", "d1", "SQL", 1.0), EvalRecord("B", "d1", "SQL", 2.0)])
        merged = storage.merge_records(path, [EvalRecord("A", "d1", "SQL", 0.5), EvalRecord("A", "d2", "SQL", 3.0)])
        assert len(merged) == 3
        loaded = storage.load_records(path)
        row = loaded[(loaded["method"] == "A") & (loaded["dataset"] == "d1")]
        assert row["value"].item() == 0.5

    def test_records_roundtrip_exact(self, tmp_path):
        records = [EvalRecord("Greedy(S=100)", "d1", "SQL", 0.1 + 0.2, 1.0 / 3.0)]
        storage.save_records(records, tmp_path / "records.csv")
        loaded = storage.load_records(tmp_path / "records.csv")
        assert loaded.at[0, 'value'] == 0.1 + 0.2
        assert loaded.at[0, 'fit_time_s'] == 1.0 / 3.0

    def test_load_several_files(self, tmp_path):
        storage.save_records([EvalRecord("A", "d1", "SQL", 1.0)], tmp_path / "one.csv")
        storage.save_records([EvalRecord("A", "d2", "SQL", 2.0)], tmp_path / "two.csv")
        frame = storage.load_records_files([tmp_path / "one.csv", tmp_path / "two.csv"])
        assert list(frame['dataset']) == ["d1", "d2"]

    def test_atomic_write_leaves_no_temp_files(self, tmp_path):
        storage.atomic_write_text(tmp_path / "out" / "report.md", "hello\n")
        assert [p.name for p in (tmp_path / "out").iterdir()] == ["report.md"]
