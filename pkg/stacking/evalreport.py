"""
Stackcast Evaluation Report
Cross-dataset aggregation: Elo, average rank, champion counts, relative error and timing
"""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Union
import logging

import numpy as np
import pandas as pd

from stacking.errors import MissingCell, SchemaMismatch, ZeroBaseline

logger = logging.getLogger(__name__)

RECORD_COLUMNS = ['method', 'dataset', 'metric', 'value', 'fit_time_s']
REL_ERROR_CLIP = (1e-3, 5.0)
ELO_SCALE = 400.0
ELO_ANCHOR = 1000.0
LEADERBOARD_COLUMNS = [
    "Elo↑",
    "Champion↑",
    "Average rank↓",
    "Average relative error↓",
    "Median marginal training time↓",
]


@dataclass(frozen=True)
class EvalRecord:
    method: str
    dataset: str
    metric: str
    value: float
    fit_time_s: float = 0.0

    def to_dict(self) -> Dict:
        return {'method': self.method, 'dataset': self.dataset, 'metric': self.metric,
                'value': self.value, 'fit_time_s': self.fit_time_s}


Records = Union[pd.DataFrame, Iterable[EvalRecord]]


def records_frame(records: Records) -> pd.DataFrame:
    """Normalize records into a frame with the record columns, checking (method, dataset, metric) uniqueness"""
    if isinstance(records, pd.DataFrame):
        frame = records.copy()
    else:
        frame = pd.DataFrame([r.to_dict() for r in records], columns=RECORD_COLUMNS)

    missing = [c for c in RECORD_COLUMNS if c not in frame.columns]
    if missing:
        raise SchemaMismatch("Record table lacks columns", missing)
    frame = frame[RECORD_COLUMNS].astype({'method': str, 'dataset': str, 'metric': str,
                                          'value': float, 'fit_time_s': float})

    duplicated = frame.duplicated(subset=['method', 'dataset', 'metric'], keep=False)
    if duplicated.any():
        pairs = sorted({f"{m}@{d}" for m, d in frame.loc[duplicated, ['method', 'dataset']].itertuples(index=False)})
        raise SchemaMismatch("Duplicate (method, dataset, metric) records", pairs)
    return frame


def _order(values: Iterable[str]) -> List[str]:
    return list(dict.fromkeys(values))


def score_table(records: Records, metric: Optional[str] = None, column: str = 'value') -> pd.DataFrame:
    """
    datasets x methods table of one metric

    Raises:
        MissingCell: a method lacks a score on some dataset
    """
    frame = records_frame(records)
    metrics = _order(frame['metric'])
    if metric is None:
        if len(metrics) > 1:
            raise SchemaMismatch("Records mix several metrics; choose one", metrics)
        metric = metrics[0] if metrics else None
    frame = frame[frame['metric'] == metric]

    table = frame.pivot(index='dataset', columns='method', values=column)
    table = table.reindex(index=_order(frame['dataset']), columns=_order(frame['method']))
    if table.isna().any().any():
        dataset, method = next((d, m) for d in table.index for m in table.columns if pd.isna(table.at[d, m]))
        raise MissingCell(method, dataset)
    return table


def avg_rank(records: Records, metric: Optional[str] = None) -> pd.Series:
    """Mean over datasets of the ascending rank with ties averaged"""
    table = score_table(records, metric)
    return table.rank(axis=1, method='average', ascending=True).mean(axis=0).rename("avg_rank")


def champion_counts(records: Records, metric: Optional[str] = None) -> pd.Series:
    """Datasets where the method attains rank 1 (every tied method is credited)"""
    table = score_table(records, metric)
    best = table.rank(axis=1, method='min', ascending=True) == 1
    return best.sum(axis=0).astype(int).rename("champion")


def gmean_relative_error(records: Records, baseline: str, metric: Optional[str] = None) -> pd.Series:
    """Geometric mean over datasets of error / baseline error, each ratio clipped to [1e-3, 5]"""
    table = score_table(records, metric)
    if baseline not in table.columns:
        raise MissingCell(baseline, str(table.index[0]) if len(table.index) else "")
    base = table[baseline]
    zero = base[base <= 0]
    if not zero.empty:
        raise ZeroBaseline(str(zero.index[0]))

    ratios = table.div(base, axis=0).clip(*REL_ERROR_CLIP)
    return np.exp(np.log(ratios).mean(axis=0)).rename("gmean_rel_error")


def pairwise_wins(table: pd.DataFrame, pseudo_ties: float = 1.0) -> np.ndarray:
    """
    W[i, j] = wins of method i over j across datasets; ties and the
    pseudo-ties count half a win for each side
    """
    values = table.to_numpy(dtype=np.float64)
    wins = (values[:, :, None] < values[:, None, :]).sum(axis=0).astype(np.float64)
    ties = (values[:, :, None] == values[:, None, :]).sum(axis=0).astype(np.float64)
    wins += 0.5 * (ties + pseudo_ties)
    np.fill_diagonal(wins, 0.0)
    return wins


def bradley_terry(wins: np.ndarray, tol: float = 1e-12, max_iter: int = 100000) -> np.ndarray:
    """MM fixed point for Bradley-Terry strengths (sum-normalized)"""
    games = wins + wins.T
    active = games > 0
    totals = wins.sum(axis=1)
    strength = np.ones(wins.shape[0])

    for _ in range(max_iter):
        pair_sum = strength[:, None] + strength[None, :]
        denom = np.where(active, games / np.where(active, pair_sum, 1.0), 0.0).sum(axis=1)
        updated = totals / denom
        updated /= updated.sum()
        if np.max(np.abs(np.log(updated) - np.log(strength / strength.sum()))) < tol:
            return updated
        strength = updated

    logger.warning(f"Bradley-Terry did not converge in {max_iter} iterations")
    return strength / strength.sum()


def elo(records: Records, baseline: str, metric: Optional[str] = None, pseudo_ties: float = 1.0) -> pd.Series:
    """Bradley-Terry MLE ratings on the 400 / log10 scale, shifted so the baseline is 1000"""
    table = score_table(records, metric)
    if baseline not in table.columns:
        raise MissingCell(baseline, str(table.index[0]) if len(table.index) else "")
    if table.shape[1] < 2:
        return pd.Series({baseline: ELO_ANCHOR}, name="elo")

    strength = bradley_terry(pairwise_wins(table, pseudo_ties))
    ratings = ELO_SCALE * np.log10(strength)
    anchor = ratings[list(table.columns).index(baseline)]
    return pd.Series(ratings - anchor + ELO_ANCHOR, index=table.columns, name="elo")


def median_fit_time(records: Records, metric: Optional[str] = None) -> pd.Series:
    return score_table(records, metric, column='fit_time_s').median(axis=0).rename("median_fit_time")


@dataclass
class Leaderboard:
    table: pd.DataFrame
    baseline: str
    metric: str
    n_datasets: int

    def to_csv(self) -> str:
        frame = self.table.reset_index().rename(columns={'index': 'method'})
        return frame.to_csv(index=False, lineterminator="\n")

    def to_markdown(self) -> str:
        formats = ["{:.0f}", "{:d}", "{:.2f}", "{:.3f}", "{:.3f}"]
        header = "| Method | " + " | ".join(LEADERBOARD_COLUMNS) + " |"
        divider = "|" + "---|" * (len(LEADERBOARD_COLUMNS) + 1)
        lines = [header, divider]
        for method, row in self.table.iterrows():
            cells = [fmt.format(int(v) if fmt == "{:d}" else float(v))
                     for fmt, v in zip(formats, row[LEADERBOARD_COLUMNS])]
            lines.append(f"| {method} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def build_leaderboard(records: Records, baseline: str = "Median", metric: Optional[str] = None) -> Leaderboard:
    """Every aggregate in one table, sorted by Elo (descending) then method name"""
    frame = records_frame(records)
    table = score_table(frame, metric)
    metric = metric or str(frame['metric'].iloc[0])

    board = pd.DataFrame({
        LEADERBOARD_COLUMNS[0]: elo(frame, baseline, metric),
        LEADERBOARD_COLUMNS[1]: champion_counts(frame, metric),
        LEADERBOARD_COLUMNS[2]: avg_rank(frame, metric),
        LEADERBOARD_COLUMNS[3]: gmean_relative_error(frame, baseline, metric),
        LEADERBOARD_COLUMNS[4]: median_fit_time(frame, metric),
    })
    board.index.name = 'method'
    board = board.assign(_name=board.index).sort_values(
        [LEADERBOARD_COLUMNS[0], '_name'], ascending=[False, True], kind='mergesort'
    ).drop(columns='_name')
    return Leaderboard(board, baseline, metric, int(table.shape[0]))


def render_leaderboard(records: Records, baseline: str = "Median", fmt: str = "markdown",
                       metric: Optional[str] = None) -> str:
    """Deterministic CSV or Markdown leaderboard"""
    board = build_leaderboard(records, baseline, metric)
    if fmt == "csv":
        return board.to_csv()
    if fmt == "markdown":
        return board.to_markdown()
    raise ValueError(f"Unknown leaderboard format '{fmt}'")


def render_report(records: Records, baseline: str = "Median", metric: Optional[str] = None,
                  extra_sections: Optional[Dict[str, str]] = None) -> str:
    """Markdown report: leaderboard plus the per-dataset score grid"""
    board = build_leaderboard(records, baseline, metric)
    table = score_table(records, board.metric)

    lines = [
        "# Stackcast Report",
        "",
        f"- Metric: {board.metric}",
        f"- Baseline: {board.baseline}",
        f"- Datasets: {board.n_datasets}",
        f"- Methods: {board.table.shape[0]}",
        "",
        "## Leaderboard",
        "",
        board.to_markdown(),
        "## Scores per dataset",
        "",
        "| Dataset | " + " | ".join(table.columns) + " |",
        "|" + "---|" * (table.shape[1] + 1),
    ]
    for dataset, row in table.iterrows():
        lines.append(f"| {dataset} | " + " | ".join(f"{v:.4f}" for v in row) + " |")
    lines.append("")

    for title, body in (extra_sections or {}).items():
        lines.extend([f"## {title}", "", body.rstrip("\n"), ""])
    return "\n".join(lines)
