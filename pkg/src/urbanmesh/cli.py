"""Command-line entry point: one subcommand per pipeline stage plus run-all.

Exit codes: 0 success, 2 missing input, 3 config/schema violation,
4 stage failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from .exceptions import StageError, UrbanMeshError
from .pipeline import STAGES, PipelineRun

EXIT_OK = 0
EXIT_MISSING_INPUT = 2
EXIT_CONFIG = 3
EXIT_STAGE = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="urbanmesh",
        description="Divide-and-conquer multi-view surface reconstruction pipeline",
    )
    parser.add_argument("--config", help="JSON config file", default=None)
    parser.add_argument("--seed", type=int, default=None, help="global seed")
    parser.add_argument("--workers", type=int, default=None, help="worker processes")
    parser.add_argument(
        "--stage-dir", required=True, help="directory holding all stage inputs/outputs"
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sub.add_parser(stage, help=f"run the {stage} stage")
    sub.add_parser("run-all", help="run every stage in order")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if not args.verbose else logging.DEBUG,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    log = logging.getLogger("urbanmesh.cli")

    config = None
    if args.config:
        try:
            with open(args.config) as fh:
                config = json.load(fh)
        except FileNotFoundError:
            log.error("config file not found: %s", args.config)
            return EXIT_MISSING_INPUT
        except json.JSONDecodeError as exc:
            log.error("config is not valid JSON: %s", exc)
            return EXIT_CONFIG

    try:
        run = PipelineRun(args.stage_dir, config, seed=args.seed, workers=args.workers)
    except StageError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG

    stages = STAGES if args.command == "run-all" else [args.command]
    for stage in stages:
        t0 = time.time()
        try:
            run.run_stage(stage)
        except StageError as exc:
            log.error("%s", exc)
            return EXIT_MISSING_INPUT if "missing input" in str(exc) else EXIT_STAGE
        except FileNotFoundError as exc:
            log.error("[%s] missing input: %s", stage, exc)
            return EXIT_MISSING_INPUT
        except UrbanMeshError as exc:
            log.error("[%s] %s", stage, exc)
            return EXIT_STAGE
        log.info("[%s] done in %.1fs", stage, time.time() - t0)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
