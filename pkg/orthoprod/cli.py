#!/usr/bin/env python3
"""
orthoprod CLI
Command-line interface for simulation, estimation and replication studies
"""

import argparse
import logging
import sys
from pathlib import Path

import pandas as pd

from orthoprod.config import DgpConfig, RunConfig
from orthoprod.data import load_panel_csv, write_panel_csv
from orthoprod.errors import EstimationError, UsageError
from orthoprod.models import TABLE_COLUMNS
from orthoprod.montecarlo import lasso_oracle_check, report_histograms, run_table, simulate_dgp
from orthoprod.pipeline import ESTIMATOR_SETS, estimate_panel
from orthoprod.utils import ensure_dir, parse_comma_separated_values, parse_int_grid, write_csv_rows, write_json


def _grid(value):
    try:
        return parse_int_grid(value)
    except ValueError as e:
        raise argparse.ArgumentTypeError(str(e))


def _dgp_list(value):
    if value.strip().lower() == 'all':
        return [1, 2, 3]
    try:
        return [int(v) for v in parse_comma_separated_values(value)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"Expected DGP numbers or 'all', got {value!r}")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=str, help='TOML configuration file')
    common.add_argument('--seed', type=int, help='Master seed')
    common.add_argument('--workers', type=int, help='Parallel workers')
    common.add_argument('--fast', action='store_true', help='Ridge first stage and capped replications')
    common.add_argument('--out', type=str, help='Output directory')
    common.add_argument('--log-level', type=str, help='Logging level (DEBUG, INFO, ...)')

    parser = argparse.ArgumentParser(
        prog='orthoprod',
        description="orthoprod - Debiased GMM for production functions with orthogonal instruments",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  orthoprod simulate --n 1000 --dgp 1 --out run1          # Simulate a panel
  orthoprod estimate run1/panel.csv --estimator both      # PI and DGMM on a panel
  orthoprod montecarlo --dgp all --n-grid 500,1000 --fast # Replication table
  orthoprod lasso-check --reps 200                        # Lasso oracle study
        """
    )

    subparsers = parser.add_subparsers(dest='command', help='Available commands')

    # Simulate command
    simulate_parser = subparsers.add_parser('simulate', parents=[common], help='Simulate a firm panel')
    simulate_parser.add_argument('--n', type=int, help='Number of firms')
    simulate_parser.add_argument('--dgp', type=int, choices=[1, 2, 3], help='DGP preset')
    simulate_parser.add_argument('--output', type=str, help='Panel CSV path (default OUT/panel.csv)')

    # Estimate command
    estimate_parser = subparsers.add_parser('estimate', parents=[common], help='Estimate a panel from CSV')
    estimate_parser.add_argument('panel', type=str, help='Long-format panel CSV')
    estimate_parser.add_argument('--estimator', choices=sorted(ESTIMATOR_SETS), default='both',
                                 help='Estimators to run')
    estimate_parser.add_argument('--model', choices=['capital_only', 'cobb_douglas_two_input'],
                                 help='Moment system')
    estimate_parser.add_argument('--debug-lasso', action='store_true',
                                 help='Dump per-fold Lasso solutions as JSON lines')

    # Monte Carlo command
    mc_parser = subparsers.add_parser('montecarlo', parents=[common], help='Run the replication study')
    mc_parser.add_argument('--dgp', type=_dgp_list, help="DGP presets, e.g. '1,3' or 'all'")
    mc_parser.add_argument('--n-grid', type=_grid, help="Sample sizes, e.g. '250,500,750,1000'")
    mc_parser.add_argument('--reps', type=int, help='Replications per cell')
    mc_parser.add_argument('--estimator', choices=sorted(ESTIMATOR_SETS), default='both',
                           help='Estimators to compare')
    mc_parser.add_argument('--histogram', action='store_true', help='Also write standardized-estimate histograms')

    # Lasso check command
    lasso_parser = subparsers.add_parser('lasso-check', parents=[common], help='Run the Lasso oracle study')
    lasso_parser.add_argument('--n-grid', type=_grid, help='Sample sizes')
    lasso_parser.add_argument('--reps', type=int, help='Replications per sample size')

    return parser


def load_config(args):
    """Defaults < environment < config file < flags."""
    config = RunConfig.from_file(args.config) if args.config else RunConfig.from_env()
    flags = {
        'seed': args.seed,
        'workers': args.workers,
        'fast': True if args.fast else None,
        'out_dir': args.out,
        'log_level': args.log_level,
    }
    if args.command == 'simulate':
        flags['n_firms'] = args.n
    elif args.command == 'estimate':
        flags['model'] = args.model
        flags['debug_lasso'] = True if args.debug_lasso else None
    elif args.command == 'montecarlo':
        flags['montecarlo.dgp'] = args.dgp
        flags['montecarlo.n_grid'] = args.n_grid
        flags['montecarlo.reps'] = args.reps
    elif args.command == 'lasso-check':
        flags['lasso_check.n_grid'] = args.n_grid
        flags['lasso_check.reps'] = args.reps
    return config.with_overrides(**flags)


def main(argv=None):
    """Main CLI entry point"""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return 0

    handlers = {
        'simulate': handle_simulate,
        'estimate': handle_estimate,
        'montecarlo': handle_montecarlo,
        'lasso-check': handle_lasso_check,
    }
    try:
        config = load_config(args)
        logging.basicConfig(level=config.log_level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
        handlers[args.command](args, config)
    except KeyboardInterrupt:
        print("\nOperation cancelled by user")
        return 1
    except OSError as e:
        print(f"❌ Error: {e}")
        return 2
    except (UsageError, EstimationError) as e:
        print(f"❌ Error: {e}")
        return e.exit_code
    return 0


def handle_simulate(args, config):
    """Handle simulate command"""
    dgp = config.dgp
    if args.dgp is not None:
        dgp = DgpConfig.preset(args.dgp, **config.dgp.model_dump(exclude={'invest_shock_sd'}))
    print(f"🏭 Simulating {config.n_firms} firms (investment shock sd {dgp.invest_shock_sd})...")
    panel = simulate_dgp(dgp, config.n_firms, config.seed)
    path = Path(args.output) if args.output else ensure_dir(config.out_dir) / 'panel.csv'
    write_panel_csv(panel, path)
    print(f"💾 Saved {panel.n_firms} x {panel.n_periods} panel to {path}")
    return path


def handle_estimate(args, config):
    """Handle estimate command"""
    panel = load_panel_csv(args.panel, config.data)
    print(f"📊 Loaded {panel.n_firms} firms x {panel.n_periods} periods from {args.panel}")
    if panel.dropped_firms:
        print(f"⚠️  Dropped {panel.dropped_firms} firms with incomplete coverage")

    out_dir = ensure_dir(config.out_dir)
    debug_path = None
    if config.debug_lasso:
        debug_path = out_dir / 'lasso_debug.jsonl'
        debug_path.unlink(missing_ok=True)
    outcome = estimate_panel(panel, config, args.estimator, debug_path=debug_path, progress_callback=print)

    results = outcome['results']
    for name, result in results.items():
        print(f"\n✅ {name.upper()}")
        for param, value, se in zip(result.param_names, result.theta, result.se):
            print(f"   {param}: {value:.4f} (SE {se:.4f})")
        for quantity, derived in result.derived.items():
            print(f"   {quantity}: {derived.value:.4f} (SE {derived.se:.4f})")

    write_json(out_dir / 'estimate.json', {
        'panel': {'path': str(args.panel), 'n_firms': panel.n_firms, 'n_periods': panel.n_periods,
                  'dropped_firms': panel.dropped_firms},
        'config': config.model_dump(),
        'results': {name: result.model_dump() for name, result in results.items()},
    })
    write_csv_rows(out_dir / 'estimate.csv', [result.to_csv_row() for result in results.values()])
    print(f"\n💾 Saved results to {out_dir}")
    return results


def handle_montecarlo(args, config):
    """Handle montecarlo command"""
    reps = config.effective_reps()
    mc = config.montecarlo
    print(f"🎲 Monte Carlo: DGPs {mc.dgp}, n in {mc.n_grid}, {reps} reps"
          f"{' (fast mode)' if config.fast else ''}")
    reports = run_table(config, estimators=args.estimator)
    for report in reports:
        print(f"✅ DGP {report.dgp}, n={report.n}: {report.reps - report.failed}/{report.reps} reps")

    out_dir = ensure_dir(config.out_dir)
    write_csv_rows(out_dir / 'montecarlo.csv', [r.table_row() for r in reports], columns=TABLE_COLUMNS)
    write_json(out_dir / 'montecarlo.json', {
        'config': config.model_dump(),
        'reports': [r.model_dump(exclude={'config'}) for r in reports],
    })
    if args.histogram:
        frames = [report_histograms(r, mc.histogram_bins) for r in reports]
        pd.concat(frames, ignore_index=True).to_csv(
            out_dir / 'montecarlo_histogram.csv', index=False, float_format='%.10g', lineterminator='\n'
        )
    print(f"💾 Saved replication table to {out_dir / 'montecarlo.csv'}")
    return reports


def handle_lasso_check(args, config):
    """Handle lasso-check command"""
    check = config.lasso_check
    print(f"🎯 Lasso oracle study: n in {check.n_grid}, {check.reps} reps")
    rows = []
    for n in check.n_grid:
        row = lasso_oracle_check(n, check.reps, config.seed, check, config.solver, config.workers)
        rows.append(row)
        print(f"   n={n}: MSE {row.mse:.4f}, correct selection {row.selection_rate:.0%}")
    out_dir = ensure_dir(config.out_dir)
    path = write_csv_rows(
        out_dir / 'lasso_check.csv',
        [{'n': r.n, 'reps': r.reps, 'mse': r.mse, 'selection_pct': 100 * r.selection_rate, 'lambda': r.lam}
         for r in rows],
        columns=['n', 'reps', 'mse', 'selection_pct', 'lambda'],
    )
    print(f"💾 Saved {path}")
    return rows


if __name__ == "__main__":
    sys.exit(main())
