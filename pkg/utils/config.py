"""
Stackcast Configuration Loader
Loads config.yml over built-in defaults and resolves the typed RunConfig
"""

import copy
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union
import logging

import yaml

from stacking.baselearners import BaseLearnerSpec
from stacking.core import ForecastTask
from stacking.errors import InvalidConfig
from stacking.multilayer import DEFAULT_PORTFOLIO, L3_KINDS
from stacking.optim import OptimConfig
from stacking.stackers import StackerSpec, TabularSettings

logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).parent.parent
DEFAULT_CONFIG_PATH = PROJECT_ROOT / "config.yml"
DEFAULT_PRESETS_PATH = PROJECT_ROOT / "presets.yml"

DEFAULTS: Dict[str, Any] = {
    'dataset': {'name': None, 'seasonality': 1, 'freq_label': "", 'min_length_factor': 8},
    'task': {
        'horizon': 4,
        'quantile_levels': [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        'eval_loss': "SQL"
    },
    'cv': {'k_folds': 5, 'min_train': None},
    'run': {'seed': 0, 'jobs': 1, 'out_dir': "runs/default", 'record_fit_times': False},
    'base_learners': "default",
    'stackers': "representatives",
    'multilayer': {'l2': "portfolio14", 'l3': "Greedy", 'l3_iterations': 100, 'retrain_l2': True},
    'optimizer': {},
    'tabular': {'hidden': 16, 'mlp_hidden': 32, 'max_steps': None},
    'report': {'baseline': "Median", 'include_base_models': False},
    'logging': {'level': "INFO", 'file': "logs/stackcast.log"}
}

REQUIRED_SECTIONS = ['dataset', 'task', 'cv', 'run', 'multilayer', 'report', 'logging']
MULTILAYER_PREFIX = "MultiLayer("


def _deep_merge(base: Dict[str, Any], override: Mapping[str, Any]) -> Dict[str, Any]:
    merged = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


class Config:
    """YAML configuration with dot-notation access"""

    def __init__(self, config_path: Optional[Union[str, Path]] = None):
        self._config: Dict[str, Any] = {}
        self.path: Optional[Path] = None
        self.load(config_path)

    def load(self, config_path: Optional[Union[str, Path]] = None):
        """Load configuration from YAML; the default file may be absent, an explicit one may not"""
        explicit = config_path is not None
        path = Path(config_path) if explicit else DEFAULT_CONFIG_PATH

        if path.exists():
            with open(path, 'r', encoding='utf-8') as f:
                loaded = yaml.safe_load(f) or {}
            if not isinstance(loaded, dict):
                raise InvalidConfig(f"{path} must hold a mapping")
            self._config = _deep_merge(DEFAULTS, loaded)
            self.path = path
            logger.info(f"Loaded configuration from {path}")
        elif explicit:
            raise FileNotFoundError(f"Configuration file not found: {path}")
        else:
            self._config = copy.deepcopy(DEFAULTS)
            logger.info("No config.yml found, using built-in defaults")

        self._validate()

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> 'Config':
        config = cls.__new__(cls)
        config._config = _deep_merge(DEFAULTS, data)
        config.path = None
        config._validate()
        return config

    def _validate(self):
        for key in REQUIRED_SECTIONS:
            if not isinstance(self._config.get(key), dict):
                raise InvalidConfig(f"missing required section '{key}'", key)
        k_folds = self.get('cv.k_folds', 0)
        if int(k_folds) < 1:
            raise InvalidConfig(f"cv.k_folds must be >= 1, got {k_folds}", 'cv.k_folds')
        m = self.get('dataset.seasonality', 0)
        if int(m) < 1:
            raise InvalidConfig(f"dataset.seasonality must be >= 1, got {m}", 'dataset.seasonality')
        # the seasonal error scale of every training prefix needs more than m points
        min_train = self.get('cv.min_train')
        if min_train is not None and int(min_train) <= int(m):
            raise InvalidConfig(f"cv.min_train must exceed dataset.seasonality ({m}), got {min_train}",
                                'cv.min_train')
        l3 = self.get('multilayer.l3')
        if l3 not in L3_KINDS:
            raise InvalidConfig(f"multilayer.l3 must be one of {L3_KINDS}, got {l3}", 'multilayer.l3')

    def get(self, key: str, default: Any = None) -> Any:
        """Get configuration value by dot-notation key (e.g., 'cv.k_folds')"""
        value = self._config
        for k in key.split('.'):
            if isinstance(value, dict):
                value = value.get(k)
                if value is None:
                    return default
            else:
                return default
        return value

    def to_dict(self) -> Dict[str, Any]:
        return copy.deepcopy(self._config)

    @property
    def task(self) -> ForecastTask:
        return ForecastTask(int(self.get('task.horizon')), tuple(self.get('task.quantile_levels')),
                            self.get('task.eval_loss', "SQL"))

    @property
    def seasonality(self) -> int:
        return int(self.get('dataset.seasonality', 1))

    @property
    def k_folds(self) -> int:
        return int(self.get('cv.k_folds', 5))

    @property
    def seed(self) -> int:
        return int(self.get('run.seed', 0))

    @property
    def out_dir(self) -> Path:
        return Path(self.get('run.out_dir', "runs/default"))

    @property
    def log_level(self) -> str:
        return self.get('logging.level', 'INFO')

    @property
    def log_file(self) -> Path:
        return Path(self.get('logging.file', 'logs/stackcast.log'))


_default_config: Optional[Config] = None


def get_config(config_path: Optional[Union[str, Path]] = None) -> Config:
    """Shared Config for the default file; an explicit path always loads fresh"""
    global _default_config
    if config_path is not None:
        return Config(config_path)
    if _default_config is None:
        _default_config = Config()
    return _default_config


def setup_logging(config: Config):
    """Setup logging based on configuration"""
    config.log_file.parent.mkdir(parents=True, exist_ok=True)

    logging.basicConfig(
        level=getattr(logging, str(config.log_level).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.FileHandler(config.log_file, encoding='utf-8'),
            logging.StreamHandler()
        ],
        force=True
    )

    logger.info("Logging initialized")


# Presets

def load_presets(path: Optional[Union[str, Path]] = None) -> Dict[str, Any]:
    path = Path(path) if path is not None else DEFAULT_PRESETS_PATH
    if not path.exists():
        raise FileNotFoundError(f"Presets file not found: {path}")
    with open(path, 'r', encoding='utf-8') as f:
        return yaml.safe_load(f) or {}


def _resolve_names(entry: Union[str, List], table: Mapping[str, Any], what: str) -> List:
    if isinstance(entry, str):
        if entry not in table:
            raise InvalidConfig(f"Unknown {what} preset '{entry}' (known: {sorted(table)})")
        return list(table[entry])
    return list(entry or [])


def resolve_stackers(entry: Union[str, List[str]], presets: Mapping[str, Any], eval_loss: str = "SQL") -> List[str]:
    """Stacker names for a preset or explicit list; MASE runs use the per-model linear representative"""
    names = _resolve_names(entry, presets.get('stackers', {}), "stacker")
    if entry == "representatives" and eval_loss.upper() == "MASE":
        names = ["Linear(m, softmax)" if n == "Linear(mq, softmax)" else n for n in names]
    return names


def resolve_base_learners(entry: Union[str, List], presets: Mapping[str, Any]) -> List[BaseLearnerSpec]:
    return [BaseLearnerSpec.from_config(e) for e in _resolve_names(entry, presets.get('base_learners', {}), "base-learner")]


@dataclass(frozen=True)
class RunConfig:
    """Everything one pipeline run needs, resolved from Config plus command-line overrides"""
    task: ForecastTask
    dataset_name: Optional[str] = None
    seasonality_m: int = 1
    freq_label: str = ""
    min_length_factor: int = 8
    k_folds: int = 5
    min_train: Optional[int] = None
    seed: int = 0
    jobs: int = 1
    out_dir: Path = Path("runs/default")
    record_fit_times: bool = False
    base_learners: Tuple[BaseLearnerSpec, ...] = ()
    stackers: Tuple[StackerSpec, ...] = ()
    multilayer_variants: Tuple[str, ...] = ()
    l2: Tuple[StackerSpec, ...] = tuple(StackerSpec.parse(n) for n in DEFAULT_PORTFOLIO)
    l3: str = "Greedy"
    l3_iterations: int = 100
    retrain_l2: bool = True
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    tabular: TabularSettings = field(default_factory=TabularSettings)
    baseline: str = "Median"
    include_base_models: bool = False

    def __post_init__(self):
        if self.jobs < 1:
            raise InvalidConfig(f"jobs must be >= 1, got {self.jobs}", 'run.jobs')
        for variant in self.multilayer_variants:
            if variant not in L3_KINDS:
                raise InvalidConfig(f"Unknown multi-layer variant '{variant}'")

    @classmethod
    def from_config(cls, config: Config, **overrides) -> 'RunConfig':
        """
        Resolve presets, stacker names and CLI overrides against a loaded Config

        Raises:
            InvalidConfig: any rejected value, including bad stacker or learner names
        """
        try:
            return cls._resolve(config, **overrides)
        except InvalidConfig:
            raise
        except ValueError as e:
            raise InvalidConfig(str(e)) from e

    @classmethod
    def _resolve(cls,
                 config: Config,
                 seed: Optional[int] = None,
                 jobs: Optional[int] = None,
                 out_dir: Optional[Union[str, Path]] = None,
                 k_folds: Optional[int] = None,
                 no_l2_retrain: bool = False,
                 baseline: Optional[str] = None,
                 presets: Optional[Mapping[str, Any]] = None) -> 'RunConfig':
        presets = presets if presets is not None else load_presets()
        task = config.task
        seed = config.seed if seed is None else int(seed)

        stacker_names = resolve_stackers(config.get('stackers'), presets, task.eval_loss)
        variants = tuple(n[len(MULTILAYER_PREFIX):-1].strip() for n in stacker_names
                         if n.startswith(MULTILAYER_PREFIX))
        stackers = tuple(StackerSpec.parse(n) for n in stacker_names if not n.startswith(MULTILAYER_PREFIX))
        l2 = tuple(StackerSpec.parse(n) for n in resolve_stackers(config.get('multilayer.l2'), presets))

        optimizer = OptimConfig.from_dict(config.get('optimizer', {})).with_overrides(seed=seed)
        tab = config.get('tabular', {})
        tabular = TabularSettings(int(tab.get('hidden', 16)), int(tab.get('mlp_hidden', 32)), tab.get('max_steps'))

        return cls(
            task=task,
            dataset_name=config.get('dataset.name'),
            seasonality_m=config.seasonality,
            freq_label=str(config.get('dataset.freq_label', "")),
            min_length_factor=int(config.get('dataset.min_length_factor', 8)),
            k_folds=int(k_folds) if k_folds is not None else config.k_folds,
            min_train=config.get('cv.min_train'),
            seed=seed,
            jobs=int(jobs) if jobs is not None else int(config.get('run.jobs', 1)),
            out_dir=Path(out_dir) if out_dir is not None else config.out_dir,
            record_fit_times=bool(config.get('run.record_fit_times', False)),
            base_learners=tuple(resolve_base_learners(config.get('base_learners'), presets)),
            stackers=stackers,
            multilayer_variants=variants,
            l2=l2,
            l3=config.get('multilayer.l3', "Greedy"),
            l3_iterations=int(config.get('multilayer.l3_iterations', 100)),
            retrain_l2=bool(config.get('multilayer.retrain_l2', True)) and not no_l2_retrain,
            optimizer=optimizer,
            tabular=tabular,
            baseline=baseline or config.get('report.baseline', "Median"),
            include_base_models=bool(config.get('report.include_base_models', False))
        )

    def with_overrides(self, **overrides) -> 'RunConfig':
        return replace(self, **{k: v for k, v in overrides.items() if v is not None})

    def to_dict(self) -> Dict[str, Any]:
        return {
            'task': self.task.to_dict(),
            'dataset_name': self.dataset_name,
            'seasonality_m': self.seasonality_m,
            'k_folds': self.k_folds,
            'min_train': self.min_train,
            'seed': self.seed,
            'jobs': self.jobs,
            'out_dir': str(self.out_dir),
            'record_fit_times': self.record_fit_times,
            'base_learners': [s.to_dict() for s in self.base_learners],
            'stackers': [s.name for s in self.stackers],
            'multilayer_variants': list(self.multilayer_variants),
            'l2': [s.name for s in self.l2],
            'l3': self.l3,
            'l3_iterations': self.l3_iterations,
            'retrain_l2': self.retrain_l2,
            'optimizer': self.optimizer.to_dict(),
            'baseline': self.baseline
        }
