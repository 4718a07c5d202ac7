"""
Stackcast CLI Runner
Batch command-line interface: ingest, backtest, fit, fit-multilayer, report, synth
"""

import argparse
import json
from pathlib import Path
import sys

# Add project root to Python path
project_root = Path(__file__).parent
if str(project_root) not in sys.path:
    sys.path.insert(0, str(project_root))

from stacking.errors import StackcastError
from stacking.multilayer import L3_KINDS
from utils.config import Config, RunConfig, get_config, setup_logging
from utils.ledger import RunLedger, convert_to_serializable
from utils.synthetic import REGIMES, generate_panel
from utils import storage
from agents.planner import PlannerAgent


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, help='Path to config YAML (default: config.yml)')
    common.add_argument('--seed', type=int, help='Random seed override')
    common.add_argument('--jobs', type=int, help='Parallel fits')
    common.add_argument('--out-dir', type=str, help='Run directory override')
    common.add_argument('--baseline', type=str, help='Baseline method for Elo and relative error')
    common.add_argument('--no-l2-retrain', action='store_true', help='Skip refitting L2 stackers on all windows')
    common.add_argument('--k-folds', type=int, help='Number of validation windows')

    parser = argparse.ArgumentParser(description='Stackcast - Forecast Combination and Multi-Layer Stacking')
    sub = parser.add_subparsers(dest='command', required=True)

    ingest = sub.add_parser('ingest', parents=[common], help='Parse and filter an input CSV into panel.csv')
    ingest.add_argument('input', type=str, help='CSV with columns item_id,timestamp,target')
    ingest.add_argument('--name', type=str, help='Dataset name (default: file stem)')

    sub.add_parser('backtest', parents=[common], help='Build the OOF store from panel.csv')
    sub.add_parser('fit', parents=[common], help='Fit configured stackers and score the holdout')

    multilayer = sub.add_parser('fit-multilayer', parents=[common], help='Fit multi-layer stacking')
    multilayer.add_argument('--l3', choices=list(L3_KINDS) + ['both'], help='L3 aggregator variant(s)')

    report = sub.add_parser('report', parents=[common], help='Aggregate records into report.md and leaderboard.csv')
    report.add_argument('records', nargs='*', help='records.csv files (default: <out-dir>/records.csv)')

    pipeline = sub.add_parser('pipeline', parents=[common], help='ingest, backtest, fit and report in one go')
    pipeline.add_argument('input', type=str)
    pipeline.add_argument('--name', type=str)

    synth = sub.add_parser('synth', parents=[common], help='Write a synthetic input CSV')
    synth.add_argument('output', type=str)
    synth.add_argument('--n-items', type=int, default=20)
    synth.add_argument('--length', type=int, default=96)
    synth.add_argument('--seasonality', type=int, default=7)
    synth.add_argument('--regime', choices=REGIMES, action='append', help='Regime(s) to sample from')
    synth.add_argument('--name', type=str, default='synthetic')

    return parser


def resolve_run_config(config: Config, args: argparse.Namespace) -> RunConfig:
    return RunConfig.from_config(
        config,
        seed=args.seed,
        jobs=args.jobs,
        out_dir=args.out_dir,
        k_folds=args.k_folds,
        no_l2_retrain=args.no_l2_retrain,
        baseline=args.baseline
    )


def run_command(args: argparse.Namespace) -> dict:
    config = get_config(args.config)
    setup_logging(config)

    if args.command == 'synth':
        seed = args.seed if args.seed is not None else config.seed
        panel = generate_panel(args.n_items, args.length, args.seasonality,
                               args.regime or list(REGIMES), seed, args.name)
        frame = storage.panel_frame(panel)
        storage.atomic_write_text(args.output, frame.to_csv(index=False, lineterminator="\n"))
        return {'output': args.output, 'items': len(panel), 'length': args.length}

    run_config = resolve_run_config(config, args)
    run_config.out_dir.mkdir(parents=True, exist_ok=True)
    ledger = RunLedger(run_config.out_dir / "ledger.jsonl")
    ledger.log(actor="cli", action="command", payload={'command': args.command, 'config': run_config.to_dict()})
    planner = PlannerAgent(run_config, ledger)

    if args.command == 'ingest':
        return planner.stage_ingest(Path(args.input), args.name)
    if args.command == 'backtest':
        return planner.stage_backtest()
    if args.command == 'fit':
        return planner.stage_fit()
    if args.command == 'fit-multilayer':
        variants = list(L3_KINDS) if args.l3 == 'both' else ([args.l3] if args.l3 else None)
        return planner.stage_fit_multilayer(variants)
    if args.command == 'report':
        return planner.stage_report([Path(p) for p in args.records] or None, args.baseline)
    return planner.run_full_pipeline(Path(args.input), args.name)


def main(argv=None):
    args = build_parser().parse_args(argv)

    print("=" * 60)
    print(f"Stackcast - {args.command}")
    print("=" * 60)

    try:
        summary = run_command(args)
    except (StackcastError, FileNotFoundError) as e:
        print(f"Error: {e}")
        sys.exit(1)

    print("\n" + "=" * 60)
    print("RESULTS SUMMARY")
    print("=" * 60)
    print(json.dumps(convert_to_serializable(summary), indent=2, default=str))
    print("=" * 60)
    return summary


if __name__ == "__main__":
    main()
