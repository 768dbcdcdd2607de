"""Command-line entry point.

Usage::

    noisebridge gen-data --config configs/toy2d.json
    noisebridge distill --config configs/toy2d.json --set distill.k=10

Exit codes: 0 on success, 1 when a stage fails (including a failed
``verify``), 2 for configuration errors.
"""

import argparse
import logging
import sys
from typing import List, Optional, Sequence

from noisebridge.config import load_config
from noisebridge.errors import ConfigurationError, NoiseBridgeError
from noisebridge.pipeline import STAGES, PurificationPipeline

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="noisebridge", description="Noise-bridge consistency purification experiments")
    parser.add_argument("command", choices=STAGES, help="Stage to run")
    parser.add_argument("--config", required=True, help="JSON run configuration")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="Override a config field, e.g. --set distill.k=10 (repeatable)",
    )
    parser.add_argument("--quiet", action="store_true", help="Suppress progress output")
    parser.add_argument("--log-level", default="WARNING", help="Logging level (default: WARNING)")
    return parser


def run(command: str, config_path: str, overrides: Sequence[str] = (), verbose: bool = True) -> int:
    """Run one stage and map its outcome to an exit code."""
    try:
        config = load_config(config_path, list(overrides))
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    try:
        result = PurificationPipeline(config, verbose=verbose).run(command)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NoiseBridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE

    if command == "verify" and not result:
        print("error: verification failed", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    return run(args.command, args.config, args.overrides, verbose=not args.quiet)


if __name__ == "__main__":
    sys.exit(main())
