import argparse
import sys
from typing import List, Optional

import sentry_sdk
import structlog
from pydantic import ValidationError

from commands import SUBCOMMANDS
from config import get_settings
from errors import DegenerateProjection, DivergedChain, InitFailed, OrbitLangevinError, SizeError, UsageError
from logger_config import configure_logger

logger = structlog.get_logger("main")

EXIT_OK = 0
EXIT_NUMERIC = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orbit-langevin", description="Langevin sampling near orbits of optima")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for module in SUBCOMMANDS.values():
        sub = module.add_parser(subparsers)
        sub.add_argument("--threads", type=int, default=None, help="worker threads (default: ORBIT_LANGEVIN_THREADS, then CPU count)")
    return parser


def init_sentry() -> None:
    settings = get_settings()
    if settings.SENTRY_DSN:
        logger.info("Initializing Sentry", env=settings.APP_ENV)
        sentry_sdk.init(
            dsn=settings.SENTRY_DSN,
            environment=settings.APP_ENV,
            traces_sample_rate=1.0 if settings.APP_ENV == "development" else 0.1,
        )


def main(argv: Optional[List[str]] = None) -> int:
    configure_logger()
    init_sentry()
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        logger.error("Invalid flags", error="--threads must be positive")
        return EXIT_USAGE

    try:
        return SUBCOMMANDS[args.command].run(args)
    except (ValidationError, UsageError, SizeError, FileNotFoundError, IsADirectoryError) as e:
        logger.error("Invalid input", command=args.command, error=str(e))
        return EXIT_USAGE
    except (DivergedChain, InitFailed, DegenerateProjection) as e:
        logger.error("Numerical failure", command=args.command, error=str(e))
        sentry_sdk.capture_exception(e)
        return EXIT_NUMERIC
    except OrbitLangevinError as e:
        logger.error("Run failed", command=args.command, error=str(e))
        sentry_sdk.capture_exception(e)
        return EXIT_NUMERIC


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        sys.exit(130)
