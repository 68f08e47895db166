"""Entry point: python -m fusejepa {train,probe,profile,serve}"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import load_config, settings
from .errors import FuseJepaError

logger = logging.getLogger("fusejepa")


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out-dir", default=None, help="override the output directory")
    parser.add_argument("--steps", type=int, default=None, help="override the step count")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fusejepa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="self-supervised training")
    p.add_argument("config")
    _add_common(p)

    p = sub.add_parser("probe", help="frozen-feature probes on a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("config")
    _add_common(p)

    p = sub.add_parser("profile", help="attention / SIGReg cost report (profile.csv)")
    p.add_argument("config")
    p.add_argument("--modes", default="pruned,persistent", help="comma-separated routing modes")
    _add_common(p)

    sub.add_parser("serve", help="run the MCP server on stdio")
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        from .server import mcp

        mcp.run()
        return 0

    from . import profiler, train

    try:
        if args.command == "train":
            run_cfg = load_config(args.config, seed=args.seed, out_dir=args.out_dir, steps=args.steps)
            result = train.train_run(run_cfg)
            logger.info("Done: %d steps, checkpoint at %s", len(result.history), result.checkpoint)
        elif args.command == "probe":
            run_cfg = load_config(args.config, seed=args.seed, out_dir=args.out_dir)
            metrics = train.probe_run(run_cfg, Path(args.checkpoint)).metrics
            logger.info("Probe: seg_miou=%.4f depth_mae=%.3fm", metrics.seg_miou, metrics.depth_mae)
        else:
            run_cfg = load_config(args.config, seed=args.seed, out_dir=args.out_dir)
            modes = tuple(m.strip() for m in args.modes.split(",") if m.strip())
            steps = 1 if args.steps is None else args.steps
            profiler.profile_command(run_cfg, steps, modes)
    except (FuseJepaError, ValueError) as e:
        logger.error("%s", e)
        return 2
    return 0


def main() -> None:
    logging.basicConfig(
        level=settings.log_level.upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    sys.exit(run())


if __name__ == "__main__":
    main()
