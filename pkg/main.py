#!/usr/bin/env python3
"""wmcodec command-line entry point."""
import argparse
import logging
import sys
from pathlib import Path

from dotenv import load_dotenv

from routers.commands import COMMANDS
from services.errors import WMCodecError
from services.log import Colors, setup_logging

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wmcodec",
        description="Neural speech codec with an embedded, extractable watermark.",
    )
    parser.add_argument("--config", type=Path, default=None,
                        help="Run-config JSON (default: $WMCODEC_CONFIG, else the desk preset)")
    parser.add_argument("--log-level", type=str.upper, default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                        help="Default: $WMCODEC_LOG_LEVEL or INFO")
    parser.add_argument("--seed", type=int, default=None, help="Override the run seed")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for command in COMMANDS.values():
        sub = subparsers.add_parser(command.name, help=command.help, description=command.help)
        for flags, kwargs in command.arguments:
            sub.add_argument(*flags, **kwargs)
        sub.set_defaults(handler=command.handler)
    return parser


def main(argv: list[str] | None = None) -> int:
    # Load environment variables from .env file
    load_dotenv()
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    try:
        return args.handler(args)
    except WMCodecError as e:
        logger.error(f"{Colors.RED}[{e.category}] {e}{Colors.RESET}")
        return e.exit_code
    except Exception:
        logger.exception("Unexpected failure")
        return 1


if __name__ == "__main__":
    sys.exit(main())
