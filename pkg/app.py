import argparse
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from commands import register_all
from config import VERSION, load_config, seed_overrides
from errors import TabForecastError

logger = logging.getLogger(__name__)

__all__ = ["VERSION", "build_parser", "main"]


def configure_logging(verbose: bool = False) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", force=True)
    # Reduce third-party verbosity
    logging.getLogger("apscheduler").setLevel(logging.WARNING)
    logging.getLogger("sqlalchemy.engine").setLevel(logging.WARNING)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tabforecast",
                                     description="Personalised beat-by-beat blood pressure forecasting")
    parser.add_argument("--config", default=None, help="INI config file (default: $TABFORECAST_CONFIG)")
    parser.add_argument("--seed", type=int, default=None, help="Seed for synthesis, splitting and initialisation")
    parser.add_argument("--jobs", type=int, default=None, help="Parallel grid cells")
    parser.add_argument("--ledger", default=None, help="SQLAlchemy URL of the run ledger (default: $TABFORECAST_DB_URL)")
    parser.add_argument("--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=f"%(prog)s {VERSION}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    register_all(subparsers)
    return parser


def _overrides(args) -> dict:
    layers = [seed_overrides(args.seed), {"grid": {"jobs": args.jobs}}, args.overrides(args)]
    merged: dict = {}
    for layer in layers:
        for section, values in layer.items():
            merged.setdefault(section, {}).update({k: v for k, v in values.items() if v is not None})
    return merged


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose)
    try:
        config = load_config(args.config, _overrides(args))
        return args.handler(args, config)
    except TabForecastError as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        logger.error(f"{args.command} failed: invalid configuration: {e}")
        print(f"error: InvalidSpec: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
