"""
cli.py

Command-line entry point.

    python cli.py <command> --config experiment.yaml [--out DIR] [--seed N] [--workers N] [--check]

Exit codes: 0 success, 2 configuration error, 3 numerical or training
failure, 4 acceptance-threshold failure (only with --check).
"""
import argparse
import logging
import sys
from pathlib import Path

import harness
import reporting
from config import ExperimentConfig, HarnessConfig, config_hash, load_config, with_overrides
from exceptions import (
    AcceptanceError,
    ArgumentError,
    ConfigurationError,
    NumericalFailureError,
    TrainingFailureError,
)

logger = logging.getLogger(__name__)

EXPERIMENTS = {
    'eval-defense': harness.run_defense_eval,
    'sweep-eps': harness.run_epsilon_sweep,
    'sweep-tstar': harness.run_tstar_sweep,
    'eval-adaptive': harness.run_adaptive_eval,
    'eval-ood': harness.run_ood_eval,
}

COMMANDS = ('gen-data', 'train-clf', 'train-diff', 'attack', 'purify', 'certify',
            *EXPERIMENTS, 'eval-quality', 'report')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='purify', description="Diffusion-based adversarial purification toolkit")
    parser.add_argument('--verbose', action='store_true', help="debug logging")
    sub = parser.add_subparsers(dest='command', required=True)
    for command in COMMANDS:
        p = sub.add_parser(command)
        p.add_argument('--config', help="YAML experiment configuration (defaults when omitted)")
        p.add_argument('--out', help="output directory (overrides output_dir)")
        p.add_argument('--seed', type=int, help="master seed (overrides seed)")
        p.add_argument('--workers', type=int, help="worker pool size (overrides workers)")
        p.add_argument('--check', action='store_true', help="fail with exit code 4 on acceptance thresholds")
        if command == 'purify':
            p.add_argument('--input', help="dataset stem to purify (default: evaluation split)")
    return parser


def _load(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    return with_overrides(config, seed=args.seed, output_dir=args.out, workers=args.workers)


def _artifacts(out_dir: Path, written) -> list:
    """Paths written by one command, relative to out_dir when they lie inside it."""
    root = out_dir.resolve()
    names = set()
    for path in written:
        path = Path(path)
        try:
            names.add(str(path.resolve().relative_to(root)))
        except ValueError:
            names.add(str(path))
    return sorted(names)


def run_command(args) -> int:
    config = _load(args)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    command = args.command
    checkpoint_hashes = {}
    written = []
    rows = []

    if command == 'gen-data':
        harness.generate_data(config, out_dir, written)
    elif command == 'train-clf':
        harness.train_classifiers(config, written)
    elif command == 'train-diff':
        harness.train_diffusion_model(config, out_dir, written)
    elif command == 'report':
        paths = sorted((out_dir / 'results').glob('*.jsonl'))
        rows = [harness.ResultRow.from_record(r) for r in reporting.read_rows(paths)]
        written.extend(reporting.report(rows, out_dir / 'report').values())
    else:
        context = harness.ExperimentContext.load(config)
        checkpoint_hashes = context.checkpoint_hashes
        if command == 'attack':
            harness.run_attacks(config, context, out_dir, written)
        elif command == 'purify':
            harness.run_purify(config, context, out_dir, args.input, written)
        elif command == 'certify':
            harness.run_certification(config, context, out_dir, written)
        elif command == 'eval-quality':
            rows = harness.run_quality_eval(config, context, out_dir, written).rows
        else:
            rows = EXPERIMENTS[command](config, context, out_dir, written)

    reporting.write_manifest(out_dir, command, config_hash(config), checkpoint_hashes,
                             _artifacts(out_dir, written))

    if args.check and rows:
        failed = harness.check_acceptance(rows)
        if failed:
            raise AcceptanceError(failed)
    return HarnessConfig.EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s %(name)s %(levelname)s %(message)s',
    )
    try:
        return run_command(args)
    except (ConfigurationError, ArgumentError) as e:
        logger.error(f"Configuration error: {e}")
        return HarnessConfig.EXIT_CONFIGURATION
    except (NumericalFailureError, TrainingFailureError) as e:
        logger.error(f"Numerical failure: {e}")
        return HarnessConfig.EXIT_NUMERICAL
    except AcceptanceError as e:
        logger.error(f"Acceptance failure: {e}")
        return HarnessConfig.EXIT_ACCEPTANCE


if __name__ == '__main__':
    sys.exit(main())
