#!/usr/bin/env python3
"""
Command-line entry point for the whisker contact-tracking pipeline.
"""
import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from typing import List, Optional

from config import LOG_LEVEL, WHISKER_LOG_FILE
from exceptions import WhiskerSimError
from pipeline_commands import PipelineCommands
from run_config import RunConfig, load_config
from run_stats import RunStats

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("gen", "calibrate", "train", "eval", "ablate-speed", "demo")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="whisker_sim", description="Whisker sim-to-real contact tracking pipeline")
    parser.add_argument("command", choices=SUBCOMMANDS)
    parser.add_argument("--config", type=Path, help="Run config JSON (defaults to the desk-scale config)")
    parser.add_argument("--seed", type=int, help="Master seed; overrides the config file")
    parser.add_argument("--out", type=Path, help="Output directory; overrides the config file")
    parser.add_argument("--paper-scale", "--full-scale", dest="full_scale", action="store_true",
                        help="200 sweeps per object, 78 procedural shapes and the full-size model")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file first, then command-line flags on top."""
    config = load_config(args.config) if args.config else RunConfig()
    if args.full_scale:
        config = config.full_scale()
    changes = {}
    if args.seed is not None:
        changes["master_seed"] = args.seed
    if args.out is not None:
        changes["output_dir"] = str(args.out)
    config = dataclasses.replace(config, **changes)
    config.validate()
    return config


def setup_logging(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        level=getattr(logging, LOG_LEVEL.upper(), logging.INFO),
        handlers=[
            logging.FileHandler(out_dir / WHISKER_LOG_FILE),
            logging.StreamHandler()
        ],
        force=True,
    )


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; returns the process exit status."""
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        setup_logging(Path(config.output_dir))
        logger.info(f"Running '{args.command}' (seed {config.master_seed}, output {config.output_dir})")

        stats = RunStats()
        commands = PipelineCommands(config, stats)
        handlers = {
            "gen": commands.gen_command,
            "calibrate": commands.calibrate_command,
            "train": commands.train_command,
            "eval": commands.eval_command,
            "ablate-speed": commands.ablate_speed_command,
            "demo": commands.demo_command,
        }
        handlers[args.command]()
        stats.log_summary()
        return 0
    except WhiskerSimError as e:
        logger.error(f"{args.command} failed: {e}")
        return 1
    except Exception as e:
        logger.exception(f"Unexpected error in '{args.command}': {e}")
        return 2


if __name__ == '__main__':
    sys.exit(main())
