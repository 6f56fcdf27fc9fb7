"""``facade3d <subcommand> --config <path> [--seed N] [--out <dir>]``."""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from .errors import Facade3DError, StageError
from .pipeline import STAGES, load_config, run_pipeline, run_stage

logger = logging.getLogger("facade3d")

SUBCOMMANDS = tuple(STAGES) + ("run",)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="facade3d", description="Facade models with window-to-wall ratios from imagery.")
    p.add_argument("subcommand", choices=SUBCOMMANDS, help="stage to run; 'run' chains every stage of the branch")
    p.add_argument("--config", required=True, help="JSON pipeline config")
    p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    p.add_argument("--out", default=None, help="output directory (overrides paths.out)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out)
        if args.subcommand == "run":
            run_pipeline(cfg)
            print(cfg.out / "model.json")
        else:
            print(run_stage(args.subcommand, cfg))
    except StageError as exc:
        cause = exc.cause
        code = cause.exit_code if isinstance(cause, Facade3DError) else exc.exit_code
        logger.error("%s failed: %s: %s", exc.stage, type(cause).__name__, cause)
        return code
    except Facade3DError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
