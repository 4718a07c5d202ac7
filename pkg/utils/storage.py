"""
Stackcast Storage
On-disk formats: schema headers, atomic writes, panels, OOF stores, stackers, records and reports
"""

import json
import os
import re
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union
import logging

import numpy as np
import pandas as pd
import yaml

from stacking.core import ModelForecastSet, QuantileForecast, TimeSeries, TimeSeriesPanel, validate_panel
from stacking.cvharness import HOLDOUT_FOLD, FoldWindow, OofStore
from stacking.errors import IrregularSpacing, ParseError, SchemaMismatch, UnknownSchemaVersion
from stacking.evalreport import RECORD_COLUMNS, EvalRecord, records_frame
from stacking.multilayer import MultiLayerEnsemble
from stacking.stackers import TrainedStacker
from utils.ledger import convert_to_serializable

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "v1"
HEADER_PREFIX = "#schema="
PANEL_COLUMNS = ['item_id', 'timestamp', 'target']
FORECAST_COLUMNS = ['item_id', 'fold', 'model', 'origin_t', 'h', 'q', 'value']
TARGET_COLUMNS = ['item_id', 'fold', 'h', 'value']
SCALE_COLUMNS = ['item_id', 'fold', 'scale']
TIME_KEYS = {'fit_time', 'fit_time_s', 'interim_finished', 'l3_started'}

PathLike = Union[str, Path]


# Headers and atomic writes

def format_header(kind: str, meta: Optional[Mapping[str, Any]] = None) -> str:
    parts = [f"{HEADER_PREFIX}{kind}/{SCHEMA_VERSION}"]
    parts += [f"{key}={value}" for key, value in (meta or {}).items()]
    return ";".join(parts)


def parse_header(line: str) -> Tuple[str, str, Dict[str, str]]:
    """'#schema=kind/v1;a=b' -> (kind, version, {'a': 'b'})"""
    body = line.strip()[len(HEADER_PREFIX):]
    fields = body.split(";")
    kind, _, version = fields[0].partition("/")
    meta = dict(f.split("=", 1) for f in fields[1:] if "=" in f)
    return kind, version, meta


def _check_header(path: Path, line: str, kind: str) -> Dict[str, str]:
    expected = f"{kind}/{SCHEMA_VERSION}"
    if not line.startswith(HEADER_PREFIX):
        raise UnknownSchemaVersion(path, "<missing>", expected)
    found_kind, version, meta = parse_header(line)
    if found_kind != kind or version != SCHEMA_VERSION:
        raise UnknownSchemaVersion(path, f"{found_kind}/{version}", expected)
    return meta


def _first_line(path: Path) -> str:
    with open(path, 'r', encoding='utf-8') as f:
        return f.readline().rstrip("\n")


def atomic_write_text(path: PathLike, text: str):
    """Write to a temporary file in the destination directory, then rename over the target"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, 'w', encoding='utf-8', newline='') as f:
            f.write(text)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise


def write_csv(path: PathLike, frame: pd.DataFrame, kind: str, meta: Optional[Mapping[str, Any]] = None):
    body = frame.to_csv(index=False, lineterminator="\n")
    atomic_write_text(path, format_header(kind, meta) + "\n" + body)


def read_csv(path: PathLike,
             kind: str,
             columns: Sequence[str],
             dtype: Optional[Mapping[str, Any]] = None,
             require_header: bool = True) -> Tuple[pd.DataFrame, Dict[str, str]]:
    """
    Read a CSV artifact, checking its schema header and columns

    Raises:
        UnknownSchemaVersion, SchemaMismatch
    """
    path = Path(path)
    first = _first_line(path)
    has_header = first.startswith(HEADER_PREFIX)
    meta = _check_header(path, first, kind) if (has_header or require_header) else {}

    frame = pd.read_csv(path, skiprows=1 if has_header else 0, dtype=dtype,
                        float_precision="round_trip", keep_default_na=False)
    missing = [c for c in columns if c not in frame.columns]
    if missing:
        raise SchemaMismatch(f"{path} lacks columns", missing)
    return frame, meta


def write_json(path: PathLike, kind: str, data: Mapping[str, Any]):
    body = json.dumps(convert_to_serializable(data), indent=2, allow_nan=True)
    atomic_write_text(path, format_header(kind) + "\n" + body + "\n")


def read_json(path: PathLike, kind: str) -> Dict[str, Any]:
    path = Path(path)
    with open(path, 'r', encoding='utf-8') as f:
        _check_header(path, f.readline().rstrip("\n"), kind)
        return json.loads(f.read())


def write_yaml(path: PathLike, kind: str, data: Mapping[str, Any]):
    body = yaml.safe_dump(convert_to_serializable(data), sort_keys=False, allow_unicode=True)
    atomic_write_text(path, format_header(kind) + "\n" + body)


def read_yaml(path: PathLike, kind: str) -> Dict[str, Any]:
    path = Path(path)
    _check_header(path, _first_line(path), kind)
    with open(path, 'r', encoding='utf-8') as f:
        return yaml.safe_load(f) or {}


def scrub_times(data: Any) -> Any:
    """Zero every wall-clock value so reruns produce identical bytes"""
    if isinstance(data, dict):
        scrubbed = {}
        for key, value in data.items():
            if key in TIME_KEYS and isinstance(value, (int, float)):
                scrubbed[key] = 0.0
            elif key == 'fit_times':
                scrubbed[key] = _zero_numbers(value)
            else:
                scrubbed[key] = scrub_times(value)
        return scrubbed
    if isinstance(data, list):
        return [scrub_times(item) for item in data]
    return data


def _zero_numbers(data: Any) -> Any:
    if isinstance(data, dict):
        return {key: _zero_numbers(value) for key, value in data.items()}
    if isinstance(data, (int, float)) and not isinstance(data, bool):
        return 0.0
    return data


# Panels

_LINE_PATTERN = re.compile(r"line (\d+)")


def _to_float(text: str) -> float:
    """Correctly rounded parse, NaN when the text is not a number"""
    try:
        return float(text)
    except (TypeError, ValueError):
        return np.nan


def _panel_from_frame(frame: pd.DataFrame,
                      line_offset: int,
                      seasonality: int,
                      name: str,
                      freq_label: str) -> TimeSeriesPanel:
    """Build a panel from string columns item_id,timestamp,target; line_offset maps row 0 to its file line"""
    targets = frame['target'].map(_to_float)
    bad_target = targets.isna() & (frame['target'].str.strip() != "") & ~frame['target'].str.strip().str.lower().isin(["nan", "na"])
    if bad_target.any():
        row = int(np.flatnonzero(bad_target.to_numpy())[0])
        raise ParseError(row + line_offset, f"target '{frame['target'].iloc[row]}' is not a number")

    stamps = pd.to_datetime(frame['timestamp'], errors='coerce')
    if stamps.isna().any():
        row = int(np.flatnonzero(stamps.isna().to_numpy())[0])
        raise ParseError(row + line_offset, f"timestamp '{frame['timestamp'].iloc[row]}' is not a date")

    data = pd.DataFrame({'item_id': frame['item_id'].astype(str), 'timestamp': stamps, 'target': targets})
    series = []
    for item_id in dict.fromkeys(data['item_id']):
        rows = data[data['item_id'] == item_id].sort_values('timestamp', kind='mergesort')
        diffs = rows['timestamp'].diff().dropna()
        if (diffs <= pd.Timedelta(0)).any() or diffs.nunique() > 1:
            raise IrregularSpacing(item_id)
        step = diffs.iloc[0] if not diffs.empty else pd.Timedelta(days=1)
        series.append(TimeSeries(item_id, rows['target'].to_numpy(dtype=np.float64),
                                 rows['timestamp'].iloc[0], step))

    return validate_panel(TimeSeriesPanel(tuple(series), seasonality, freq_label, name))


def ingest_csv(path: PathLike, seasonality: int = 1, name: Optional[str] = None,
               freq_label: str = "") -> TimeSeriesPanel:
    """
    Parse an input CSV (header item_id,timestamp,target) into a validated panel;
    a leading schema line (as in a saved panel) is skipped

    Raises:
        ParseError, IrregularSpacing, SchemaMismatch and the core dataset errors
    """
    path = Path(path)
    has_header = _first_line(path).startswith(HEADER_PREFIX)
    try:
        frame = pd.read_csv(path, skiprows=1 if has_header else 0, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as exc:
        match = _LINE_PATTERN.search(str(exc))
        line = int(match.group(1)) + (1 if has_header else 0) if match else 0
        raise ParseError(line, str(exc).strip()) from exc

    missing = [c for c in PANEL_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaMismatch(f"{path} lacks columns", missing)
    line_offset = 2 + (1 if has_header else 0)
    return _panel_from_frame(frame, line_offset, seasonality, name or path.stem, freq_label)


def panel_frame(panel: TimeSeriesPanel) -> pd.DataFrame:
    rows = []
    for series in panel:
        stamps = series.timestamps()
        rows.append(pd.DataFrame({
            'item_id': series.item_id,
            'timestamp': [ts.isoformat() for ts in stamps],
            'target': series.values
        }))
    return pd.concat(rows, ignore_index=True) if rows else pd.DataFrame(columns=PANEL_COLUMNS)


def save_panel(panel: TimeSeriesPanel, path: PathLike):
    meta = {'name': panel.name, 'seasonality': panel.seasonality_m, 'freq_label': panel.freq_label}
    write_csv(path, panel_frame(panel), "panel", meta)


def load_panel(path: PathLike) -> TimeSeriesPanel:
    path = Path(path)
    frame, meta = read_csv(path, "panel", PANEL_COLUMNS, dtype=str)
    return _panel_from_frame(frame, 3, int(meta.get('seasonality', 1)),
                             meta.get('name', path.stem), meta.get('freq_label', ""))


# Forecast records and OOF stores

def forecast_frame(forecasts: ModelForecastSet, fold: int, quantile_levels: Sequence[float]) -> pd.DataFrame:
    """Long records ordered (model, item, h, q)"""
    item_ids = forecasts.item_ids
    if not item_ids:
        return pd.DataFrame(columns=FORECAST_COLUMNS)
    values = forecasts.to_array(item_ids).transpose(1, 0, 2, 3)    # (M, N, H, Q)
    n_models, n_items, horizon, n_q = values.shape
    m_idx, n_idx, h_idx, q_idx = np.indices(values.shape).reshape(4, -1)
    origins = np.array([forecasts.origin(item) for item in item_ids])
    return pd.DataFrame({
        'item_id': np.asarray(item_ids, dtype=object)[n_idx],
        'fold': fold,
        'model': np.asarray(forecasts.model_ids, dtype=object)[m_idx],
        'origin_t': origins[n_idx],
        'h': h_idx + 1,
        'q': np.asarray(quantile_levels, dtype=np.float64)[q_idx],
        'value': values.reshape(-1)
    })


def read_forecast_records(path: PathLike) -> pd.DataFrame:
    """Forecast-record file (OOF fold, holdout or external); the schema line is optional"""
    frame, _ = read_csv(path, "forecasts", FORECAST_COLUMNS,
                        dtype={'item_id': str, 'model': str}, require_header=False)
    return frame.astype({'fold': int, 'origin_t': int, 'h': int, 'q': float, 'value': float})


def _forecast_set(frame: pd.DataFrame,
                  item_ids: Sequence[str],
                  model_ids: Sequence[str],
                  horizon: int,
                  quantile_levels: Sequence[float]) -> ModelForecastSet:
    item_index = {item: n for n, item in enumerate(item_ids)}
    level_index = {float(q): n for n, q in enumerate(quantile_levels)}
    values = np.full((len(model_ids), len(item_ids), horizon, len(quantile_levels)), np.nan)
    origins: Dict[str, int] = {}

    for j, model in enumerate(model_ids):
        rows = frame[frame['model'] == model]
        n_idx = rows['item_id'].map(item_index).to_numpy()
        q_idx = rows['q'].map(level_index).to_numpy()
        if np.isnan(n_idx.astype(float)).any() or np.isnan(q_idx.astype(float)).any():
            raise SchemaMismatch(f"Model '{model}' has records for unknown items or quantile levels")
        values[j, n_idx.astype(int), rows['h'].to_numpy() - 1, q_idx.astype(int)] = rows['value'].to_numpy()
        origins.update(dict(zip(rows['item_id'], rows['origin_t'].astype(int))))

    if np.isnan(values).any():
        raise SchemaMismatch("Forecast records do not cover every (model, item, h, q) cell")
    forecasts = {
        model: {item: QuantileForecast(item, origins[item], values[j, n]) for n, item in enumerate(item_ids)}
        for j, model in enumerate(model_ids)
    }
    return ModelForecastSet(tuple(model_ids), forecasts)


def save_store(store: OofStore, directory: PathLike, record_fit_times: bool = False):
    """Persist an OOF store under <directory>/oof"""
    oof_dir = Path(directory) / "oof"
    levels = store.quantile_levels
    target_rows, scale_rows = [], []

    for k in sorted(store.forecasts):
        frame = forecast_frame(store.forecasts[k], k, levels)
        filename = "holdout.csv" if k == HOLDOUT_FOLD else f"fold_{k}.csv"
        write_csv(oof_dir / filename, frame, "forecasts", {'fold': k})
        for item_id in store.forecasts[k].item_ids:
            target = store.targets[k][item_id]
            target_rows.append(pd.DataFrame({'item_id': item_id, 'fold': k,
                                             'h': np.arange(1, target.shape[0] + 1), 'value': target}))
            scale_rows.append({'item_id': item_id, 'fold': k, 'scale': store.scales[k][item_id]})

    targets = pd.concat(target_rows, ignore_index=True) if target_rows else pd.DataFrame(columns=TARGET_COLUMNS)
    write_csv(oof_dir / "targets.csv", targets, "targets")
    write_csv(oof_dir / "scales.csv", pd.DataFrame(scale_rows, columns=SCALE_COLUMNS), "scales")

    fit_times = {m: {int(k): (float(t) if record_fit_times else 0.0) for k, t in per_fold.items()}
                 for m, per_fold in store.fit_times.items()}
    meta = {
        'k_folds': store.k_folds,
        'horizon': store.horizon,
        'quantile_levels': list(levels),
        'model_ids': list(store.model_ids),
        'seasonality_m': store.seasonality_m,
        'seed': store.seed,
        'fit_times': fit_times,
        'skipped': {int(k): list(v) for k, v in store.skipped.items()},
        'windows': {
            int(k): {item: [w.train_end, w.val_start, w.val_end] for item, w in per_item.items()}
            for k, per_item in sorted(store.windows.items())
        }
    }
    write_yaml(oof_dir / "meta.yml", "oof-meta", meta)
    logger.info(f"Saved OOF store ({len(store.folds)} folds, holdout={store.has_holdout}) to {oof_dir}")


def load_store(directory: PathLike) -> OofStore:
    """Inverse of save_store (fitted learners are not persisted)"""
    oof_dir = Path(directory) / "oof"
    meta = read_yaml(oof_dir / "meta.yml", "oof-meta")
    levels = tuple(float(q) for q in meta['quantile_levels'])
    model_ids = tuple(meta['model_ids'])
    store = OofStore(int(meta['k_folds']), int(meta['horizon']), levels, model_ids,
                     int(meta.get('seasonality_m', 1)), int(meta.get('seed', 0)))
    store.fit_times = {m: {int(k): float(t) for k, t in per.items()} for m, per in meta['fit_times'].items()}
    store.skipped = {int(k): list(v) for k, v in (meta.get('skipped') or {}).items()}

    targets, _ = read_csv(oof_dir / "targets.csv", "targets", TARGET_COLUMNS, dtype={'item_id': str})
    scales, _ = read_csv(oof_dir / "scales.csv", "scales", SCALE_COLUMNS, dtype={'item_id': str})

    for k, per_item in meta['windows'].items():
        k = int(k)
        item_ids = list(per_item)
        store.windows[k] = {item: FoldWindow(k, *map(int, w)) for item, w in per_item.items()}
        filename = "holdout.csv" if k == HOLDOUT_FOLD else f"fold_{k}.csv"
        frame, _ = read_csv(oof_dir / filename, "forecasts", FORECAST_COLUMNS, dtype={'item_id': str, 'model': str})
        store.forecasts[k] = _forecast_set(frame, item_ids, model_ids, store.horizon, levels)

        fold_targets = targets[targets['fold'] == k].sort_values(['h'], kind='mergesort')
        store.targets[k] = {item: fold_targets.loc[fold_targets['item_id'] == item, 'value'].to_numpy(dtype=np.float64)
                            for item in item_ids}
        fold_scales = scales[scales['fold'] == k].set_index('item_id')['scale']
        store.scales[k] = {item: float(fold_scales[item]) for item in item_ids}

    return store


# Stackers, ensembles and tables

def save_stacker(stacker: TrainedStacker, path: PathLike, record_fit_times: bool = False):
    data = stacker.to_dict()
    write_json(path, "stacker", data if record_fit_times else scrub_times(data))


def load_stacker(path: PathLike) -> TrainedStacker:
    return TrainedStacker.from_dict(read_json(path, "stacker"))


def save_ensemble(ensemble: MultiLayerEnsemble, path: PathLike, record_fit_times: bool = False):
    data = ensemble.to_dict()
    write_json(path, "ensemble", data if record_fit_times else scrub_times(data))


def load_ensemble(path: PathLike) -> MultiLayerEnsemble:
    return MultiLayerEnsemble.from_dict(read_json(path, "ensemble"))


def save_l3_weights(rows: Sequence[Mapping[str, Any]], path: PathLike):
    """One row per (dataset, L3 variant) with a column per L2 stacker"""
    write_csv(path, pd.DataFrame(list(rows)), "l3-weights")


def save_records(records: Union[pd.DataFrame, Iterable[EvalRecord]], path: PathLike):
    write_csv(path, records_frame(records), "records")


def load_records(path: PathLike) -> pd.DataFrame:
    frame, _ = read_csv(path, "records", RECORD_COLUMNS, dtype={'method': str, 'dataset': str, 'metric': str})
    return records_frame(frame)


def merge_records(path: PathLike, new_records: Iterable[EvalRecord]) -> pd.DataFrame:
    """Add records to an existing file, replacing rows with the same (method, dataset, metric)"""
    fresh = records_frame(list(new_records))
    path = Path(path)
    if path.exists():
        existing = load_records(path)
        keys = set(fresh[['method', 'dataset', 'metric']].itertuples(index=False, name=None))
        keep = [key not in keys for key in existing[['method', 'dataset', 'metric']].itertuples(index=False, name=None)]
        fresh = pd.concat([existing[keep], fresh], ignore_index=True)
    save_records(fresh, path)
    return fresh


def save_text(path: PathLike, kind: str, text: str):
    atomic_write_text(path, format_header(kind) + "\n" + text)


def load_records_files(paths: Sequence[PathLike]) -> pd.DataFrame:
    frames = [load_records(p) for p in paths]
    return records_frame(pd.concat(frames, ignore_index=True)) if frames else records_frame([])
