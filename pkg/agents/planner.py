"""
Stackcast Planner Agent
Orchestrates the workflow: ingest → backtest → fit stackers → fit multi-layer → report
"""

from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence
from datetime import datetime, timezone
import logging

from stacking.core import QuantileForecast, TimeSeriesPanel, filter_min_length
from stacking.cvharness import HOLDOUT_FOLD, OofStore, backtest, leakage_check
from stacking.errors import SchemaMismatch
from stacking.evalreport import EvalRecord, build_leaderboard, render_report
from stacking.losses import SeasonalScale, dataset_loss, score_item
from stacking.multilayer import (
    MultiLayerEnsemble,
    assemble_multilayer,
    audit_two_level,
    fit_l2_stage,
    predict_multilayer_from_forecasts,
)
from stacking.stackers import TrainedStacker, combine, fit_stackers
from utils.config import RunConfig
from utils.ledger import RunLedger
from utils import storage

logger = logging.getLogger(__name__)


class PlannerAgent:
    """Runs the batch stages against one run directory"""

    def __init__(self, config: RunConfig, ledger: RunLedger):
        self.config = config
        self.ledger = ledger

        # State
        self.panel: Optional[TimeSeriesPanel] = None
        self.store: Optional[OofStore] = None
        self.stackers: List[TrainedStacker] = []
        self.ensembles: List[MultiLayerEnsemble] = []
        self.records: List[EvalRecord] = []

        logger.info(f"PlannerAgent initialized for {self.out_dir}")

    @property
    def out_dir(self) -> Path:
        return Path(self.config.out_dir)

    @property
    def panel_path(self) -> Path:
        return self.out_dir / "panel.csv"

    @property
    def records_path(self) -> Path:
        return self.out_dir / "records.csv"

    def _fit_time(self, seconds: float) -> float:
        return float(seconds) if self.config.record_fit_times else 0.0

    def _dataset_name(self) -> str:
        if self.config.dataset_name:
            return self.config.dataset_name
        if self.panel is None and self.panel_path.exists():
            self.panel = storage.load_panel(self.panel_path)
        return self.panel.name if self.panel is not None else self.out_dir.name

    def _load_store(self) -> OofStore:
        if self.store is None:
            self.store = storage.load_store(self.out_dir)
        task = self.config.task
        if self.store.horizon != task.horizon or self.store.quantile_levels != task.quantile_levels:
            raise SchemaMismatch(
                f"Store has H={self.store.horizon}, Q={list(self.store.quantile_levels)}; "
                f"config asks for H={task.horizon}, Q={list(task.quantile_levels)}"
            )
        if not self.store.has_holdout:
            raise SchemaMismatch(f"Store in {self.out_dir} has no holdout forecasts")
        return self.store

    def _holdout_value(self, forecasts: Mapping[str, QuantileForecast]) -> float:
        store = self.store
        scores = [
            score_item(forecasts[item_id], store.targets[HOLDOUT_FOLD][item_id],
                       SeasonalScale(item_id, store.scales[HOLDOUT_FOLD][item_id]), self.config.task)
            for item_id in store.forecasts[HOLDOUT_FOLD].item_ids
        ]
        return dataset_loss(scores).value

    def _record(self, method: str, value: float, fit_time: float) -> EvalRecord:
        return EvalRecord(method, self._dataset_name(), self.config.task.eval_loss, float(value),
                          self._fit_time(fit_time))

    def stage_ingest(self, input_csv: Path, name: Optional[str] = None) -> Dict[str, Any]:
        """
        Stage 1: Parse the input CSV, filter short series and persist the panel

        Returns:
            Ingestion summary (items kept / dropped)
        """
        input_csv = Path(input_csv)
        logger.info(f"Stage 1: Ingesting {input_csv}")
        cfg = self.config

        raw = storage.ingest_csv(input_csv, cfg.seasonality_m, name or cfg.dataset_name, cfg.freq_label)
        self.panel = filter_min_length(raw, cfg.task.horizon, cfg.min_length_factor)
        storage.save_panel(self.panel, self.panel_path)

        summary = {
            'dataset': self.panel.name,
            'input': str(input_csv),
            'kept': len(self.panel),
            'dropped': len(raw) - len(self.panel),
            'min_length': cfg.min_length_factor * cfg.task.horizon,
            'panel': str(self.panel_path)
        }
        self.ledger.log(actor="planner", action="ingest", payload=summary)
        logger.info(f"Ingestion complete: kept {summary['kept']}, dropped {summary['dropped']}")
        return summary

    def stage_backtest(self) -> Dict[str, Any]:
        """
        Stage 2: Build the OOF store over K windows plus the holdout forecasts

        Returns:
            Store summary with the leakage check result
        """
        logger.info("Stage 2: Backtesting base learners")
        cfg = self.config
        if self.panel is None:
            self.panel = storage.load_panel(self.panel_path)

        self.store = backtest(self.panel, cfg.base_learners, cfg.k_folds, cfg.task,
                              cfg.seed, cfg.min_train, cfg.jobs)
        violations = leakage_check(self.store)
        storage.save_store(self.store, self.out_dir, cfg.record_fit_times)

        summary = self.store.summary()
        summary['records'] = {k: self.store.n_records(k) for k in sorted(self.store.forecasts)}
        summary['leakage_violations'] = [str(v) for v in violations]
        self.ledger.log(actor="planner", action="backtest", payload=summary)
        logger.info(f"Backtest complete: {len(self.store.folds)} folds, {len(violations)} leakage violations")
        return summary

    def stage_fit(self) -> Dict[str, Any]:
        """
        Stage 3: Fit every configured stacker on all windows and score it on the holdout

        Multi-layer entries of the stacker list run through stage_fit_multilayer.

        Returns:
            Fit summary keyed by stacker name
        """
        logger.info("Stage 3: Fitting stackers")
        cfg = self.config
        store = self._load_store()
        holdout = store.forecasts[HOLDOUT_FOLD]

        self.stackers = fit_stackers(cfg.stackers, store, cfg.task, cfg.optimizer,
                                     tabular=cfg.tabular, jobs=cfg.jobs)
        records: List[EvalRecord] = []
        summary: Dict[str, Any] = {'dataset': self._dataset_name(), 'stackers': {}}

        for trained in self.stackers:
            value = self._holdout_value(combine(trained, holdout))
            records.append(self._record(trained.name, value, trained.fit_time))
            storage.save_stacker(trained, self.out_dir / "stackers" / f"{trained.spec.slug}.json",
                                 cfg.record_fit_times)
            summary['stackers'][trained.name] = {'holdout': value, 'train_loss': trained.train_loss}

        if cfg.include_base_models:
            for model_id in store.model_ids:
                forecasts = {item: holdout.forecasts[model_id][item] for item in holdout.item_ids}
                value = self._holdout_value(forecasts)
                records.append(self._record(model_id, value, store.marginal_fit_time(model_id)))
                summary['stackers'][model_id] = {'holdout': value}

        if cfg.multilayer_variants:
            summary['multilayer'] = self.stage_fit_multilayer(cfg.multilayer_variants, records)

        storage.merge_records(self.records_path, records)
        self.records.extend(records)
        self.ledger.log(actor="planner", action="fit", payload=summary)
        logger.info(f"Fit complete: {len(records)} records")
        return summary

    def stage_fit_multilayer(self, variants: Optional[Sequence[str]] = None,
                             collect: Optional[List[EvalRecord]] = None) -> Dict[str, Any]:
        """
        Stage 4: Two-level CV fit of the L2 portfolio and each L3 variant

        Records go to `collect` when given (stage_fit persists them), else straight to records.csv

        Returns:
            Per-variant holdout loss, window-K loss and audit result
        """
        logger.info("Stage 4: Fitting multi-layer stacking")
        cfg = self.config
        store = self._load_store()
        variants = list(variants or cfg.multilayer_variants or (cfg.l3,))

        stage = fit_l2_stage(store, cfg.l2, cfg.task, cfg.optimizer, cfg.tabular, cfg.retrain_l2, cfg.jobs)
        summary: Dict[str, Any] = {'retrain_l2': cfg.retrain_l2, 'variants': {}}
        weight_rows = []
        records: List[EvalRecord] = []

        for variant in variants:
            ensemble = assemble_multilayer(stage, cfg.task, variant, cfg.l3_iterations, store)
            violations = audit_two_level(ensemble)
            value = self._holdout_value(predict_multilayer_from_forecasts(ensemble, store.forecasts[HOLDOUT_FOLD]))
            records.append(self._record(ensemble.name, value, ensemble.fit_time))
            self.ensembles.append(ensemble)

            storage.save_ensemble(ensemble, self.out_dir / "multilayer" / f"{variant.lower()}.json",
                                  cfg.record_fit_times)
            weight_rows.append({'dataset': self._dataset_name(), 'l3': variant, **ensemble.l3_weights()})
            summary['variants'][ensemble.name] = {
                'holdout': value,
                'window_k_loss': ensemble.l3.train_loss,
                'audit_violations': violations
            }

        storage.save_l3_weights(weight_rows, self.out_dir / "l3_weights.csv")
        if collect is not None:
            collect.extend(records)
        else:
            storage.merge_records(self.records_path, records)
            self.records.extend(records)
        self.ledger.log(actor="planner", action="fit_multilayer", payload=summary)
        logger.info(f"Multi-layer fit complete: {', '.join(summary['variants'])}")
        return summary

    def stage_report(self, records_paths: Optional[Sequence[Path]] = None,
                     baseline: Optional[str] = None) -> Dict[str, Any]:
        """
        Stage 5: Aggregate records across datasets into report.md and leaderboard.csv

        Returns:
            Report summary
        """
        logger.info("Stage 5: Rendering report")
        paths = [Path(p) for p in (records_paths or [self.records_path])]
        baseline = baseline or self.config.baseline

        records = storage.load_records_files(paths)
        board = build_leaderboard(records, baseline)
        storage.save_text(self.out_dir / "leaderboard.csv", "leaderboard", board.to_csv())
        storage.save_text(self.out_dir / "report.md", "report", render_report(records, baseline, board.metric))

        summary = {
            'records': [str(p) for p in paths],
            'baseline': baseline,
            'metric': board.metric,
            'datasets': board.n_datasets,
            'methods': list(board.table.index),
            'report': str(self.out_dir / "report.md")
        }
        self.ledger.log(actor="planner", action="report", payload=summary)
        logger.info(f"Report complete: {len(summary['methods'])} methods over {board.n_datasets} datasets")
        return summary

    def run_full_pipeline(self, input_csv: Path, name: Optional[str] = None) -> Dict[str, Any]:
        """
        Run ingest → backtest → fit (with multi-layer entries) → report

        Returns:
            Complete pipeline summary
        """
        logger.info("=" * 60)
        logger.info(f"Running full pipeline for {input_csv}")
        logger.info("=" * 60)

        pipeline_start = datetime.now(timezone.utc)
        results: Dict[str, Any] = {'input': str(input_csv), 'started_at': pipeline_start.isoformat(), 'stages': {}}

        try:
            results['stages']['ingest'] = self.stage_ingest(input_csv, name)
            results['stages']['backtest'] = self.stage_backtest()
            if self.config.stackers:
                results['stages']['fit'] = self.stage_fit()
            elif self.config.multilayer_variants:
                results['stages']['fit_multilayer'] = self.stage_fit_multilayer()
            results['stages']['report'] = self.stage_report()
        except Exception as e:
            logger.error(f"Pipeline failed: {e}", exc_info=True)
            self.ledger.log(actor="planner", action="pipeline_failed", payload={'error': str(e)})
            raise

        duration = (datetime.now(timezone.utc) - pipeline_start).total_seconds()
        results['duration_seconds'] = duration
        results['status'] = 'success'
        self.ledger.log(actor="planner", action="pipeline_complete", payload={'duration': duration})
        logger.info(f"Pipeline completed in {duration:.2f} seconds")
        return results
