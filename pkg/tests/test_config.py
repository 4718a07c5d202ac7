"""Tests for configuration loading, presets and the resolved RunConfig"""

from pathlib import Path

import pytest
import yaml

from stacking.baselearners import LearnerKind
from stacking.errors import InvalidConfig, StackcastError
from utils.config import (
    DEFAULTS,
    Config,
    RunConfig,
    load_presets,
    resolve_base_learners,
    resolve_stackers,
)


def _config_file(tmp_path, data):
    path = tmp_path / "config.yml"
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


class TestConfig:
    def test_file_merged_over_defaults(self, tmp_path):
        config = Config(_config_file(tmp_path, {'task': {'horizon': 3}, 'cv': {'k_folds': 4}}))
        assert config.task.horizon == 3
        assert config.task.quantile_levels == tuple(DEFAULTS['task']['quantile_levels'])
        assert config.k_folds == 4
        assert config.get('multilayer.l3') == "Greedy"
        assert config.path == tmp_path / "config.yml"

    def test_missing_explicit_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            Config(tmp_path / "absent.yml")

    @pytest.mark.parametrize("bad", [
        {'cv': {'k_folds': 0}},
        {'dataset': {'seasonality': 0}},
        {'multilayer': {'l3': "Mean"}},
        {'run': "not a section"},
        {'dataset': {'seasonality': 7}, 'cv': {'min_train': 7}},
    ])
    def test_invalid_values(self, bad):
        with pytest.raises(InvalidConfig) as err:
            Config.from_dict(bad)
        assert isinstance(err.value, StackcastError) and isinstance(err.value, ValueError)

    def test_min_train_above_seasonality_accepted(self):
        config = Config.from_dict({'dataset': {'seasonality': 7}, 'cv': {'min_train': 8}})
        assert config.get('cv.min_train') == 8

    def test_dot_access_default(self):
        config = Config.from_dict({})
        assert config.get('task.nothing', 7) == 7
        assert config.get('run.record_fit_times') is False

    def test_explicit_values_override_defaults(self):
        config = Config.from_dict({'run': {'record_fit_times': True}})
        assert config.get('run.record_fit_times', False) is True

    def test_repository_config_loads(self):
        config = Config(Path(__file__).parent.parent / "config.yml")
        assert config.task.horizon == 7
        assert config.seasonality == 7


class TestPresets:
    @pytest.fixture
    def presets(self):
        return load_presets()

    def test_representatives(self, presets):
        names = resolve_stackers("representatives", presets)
        assert "Linear(mq, softmax)" in names
        assert "MultiLayer(Greedy)" in names

    def test_mase_swaps_linear_representative(self, presets):
        names = resolve_stackers("representatives", presets, "MASE")
        assert "Linear(m, softmax)" in names
        assert "Linear(mq, softmax)" not in names

    def test_explicit_list_untouched(self, presets):
        assert resolve_stackers(["Linear(mq, softmax)"], presets, "MASE") == ["Linear(mq, softmax)"]

    def test_unknown_preset(self, presets):
        with pytest.raises(ValueError):
            resolve_stackers("everything", presets)

    def test_portfolio_has_fourteen(self, presets):
        assert len(resolve_stackers("portfolio14", presets)) == 14

    def test_base_learner_entries(self, presets):
        specs = resolve_base_learners(["SES", {'kind': "LinearAR", 'params': {'p': 3}, 'name': "AR3"}], presets)
        assert [s.name for s in specs] == ["SES", "AR3"]
        assert specs[1].kind == LearnerKind.LINEAR_AR
        assert [s.name for s in resolve_base_learners("default", presets)] == \
            ["SeasonalNaive", "SES", "Theta", "LinearAR"]


class TestRunConfig:
    def test_multilayer_entries_split_out(self):
        run = RunConfig.from_config(Config.from_dict({}))
        assert run.multilayer_variants == ("SelectBest", "Greedy")
        assert all(not s.name.startswith("MultiLayer") for s in run.stackers)
        assert len(run.l2) == 14

    def test_overrides(self, tmp_path):
        run = RunConfig.from_config(Config.from_dict({}), seed=9, jobs=2, out_dir=tmp_path,
                                    k_folds=3, no_l2_retrain=True, baseline="Mean")
        assert run.seed == 9
        assert run.optimizer.seed == 9
        assert run.jobs == 2
        assert run.out_dir == tmp_path
        assert run.k_folds == 3
        assert run.retrain_l2 is False
        assert run.baseline == "Mean"

    def test_optimizer_section(self):
        run = RunConfig.from_config(Config.from_dict({'optimizer': {'max_steps': 25, 'lr0': 0.1}}))
        assert run.optimizer.max_steps == 25
        assert run.optimizer.lr0 == 0.1

    def test_invalid_jobs(self):
        with pytest.raises(InvalidConfig):
            RunConfig.from_config(Config.from_dict({}), jobs=0)

    def test_bad_stacker_name_reported_as_config_error(self):
        with pytest.raises(InvalidConfig, match="tying"):
            RunConfig.from_config(Config.from_dict({'stackers': ["Median", "Linear(zz, softmax)"]}))

    def test_to_dict_names_everything(self):
        data = RunConfig.from_config(Config.from_dict({'stackers': ["Median", "Greedy(S=10)"]})).to_dict()
        assert data['stackers'] == ["Median", "Greedy(S=10)"]
        assert data['multilayer_variants'] == []
        assert data['task']['horizon'] == DEFAULTS['task']['horizon']
