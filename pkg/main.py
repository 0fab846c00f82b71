#!/usr/bin/env python3
"""
Neural Bloom Filter workbench
Command-line entry point for training, evaluation, sweeps, benchmarks and data generation
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from config.settings import settings
from config.schema import ConfigError, parse_config
from handlers.commands import COMMANDS, report_failure, run_command

# Configure logging
logging.basicConfig(
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    level=settings.log_level
)
logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='nbf', description=__doc__.strip().splitlines()[0])
    parser.add_argument('command', choices=COMMANDS)
    parser.add_argument('--config', type=Path, default=None, help='JSON run configuration')
    parser.add_argument('--seed', type=int, default=None, help='overrides the config seed (default 0)')
    parser.add_argument('--out', type=Path, default=None,
                        help='output directory (default: $NBF_BENCH_OUT/<command>)')
    parser.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='dotted config override, repeatable')
    parser.add_argument('--workers', type=int, default=settings.WORKERS,
                        help='internal parallelism (default: $NBF_WORKERS or 1)')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point"""
    args = build_parser().parse_args(argv)
    out_dir = args.out or Path(settings.BENCH_OUT) / args.command
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")

    try:
        if args.workers < 1:
            raise ConfigError('workers', f"--workers must be >= 1, got {args.workers}")
        config = parse_config(args.config, overrides)
    except Exception as e:
        logger.error(f"Invalid configuration: {e}")
        return report_failure(out_dir, e)

    return run_command(args.command, config, out_dir, args.workers)


if __name__ == '__main__':
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        logger.info("Stopped by user")
        sys.exit(130)
