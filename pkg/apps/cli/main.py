from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from apps.cli import commands
from apps.foveation.errors import EXIT_OK, DivergenceError, FoveationError, exit_code_for
from apps.foveation.flops import PRESETS
from apps.foveation.fovea import PatternKind
from config.paths import RUNS_DIR
from config.settings import load_settings, write_resolved

logger = logging.getLogger("foveation.cli")

PATTERN_CHOICES = [kind.value for kind in PatternKind]


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="INI config file (default: config/default.ini)")
    common.add_argument("--seed", type=int, default=None, help="Overrides run.seed")
    common.add_argument("--out", type=Path, default=None, help="Run directory (default: runs/<command>)")
    common.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="Config override, repeatable",
    )
    common.add_argument("--log-level", default="INFO", help="DEBUG, INFO, WARNING or ERROR")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(description="Gaze-centered foveated tokenization and flow-matching policy toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pattern", parents=[common], help="Draw a tokenization pattern and write its text form")
    p.add_argument("--kind", choices=PATTERN_CHOICES, default=None)
    p.set_defaults(handler=lambda s, out, a: commands.cmd_pattern(s, out, a.kind))

    p = sub.add_parser("tokenize", parents=[common], help="Tokenize an image and write tokens plus a mosaic")
    p.add_argument("--kind", choices=PATTERN_CHOICES, default=None)
    p.set_defaults(handler=lambda s, out, a: commands.cmd_tokenize(s, out, a.kind))

    p = sub.add_parser("flops", parents=[common], help="FLOP table for Fine / Coarse / Foveated")
    p.add_argument("--preset", choices=list(PRESETS), default="vit-b")
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--time", action="store_true", help="Also time one desk-scale forward pass per pattern")
    p.set_defaults(handler=lambda s, out, a: commands.cmd_flops(s, out, a.preset, a.batch, a.time))

    p = sub.add_parser("mae-demo", parents=[common], help="Masked-autoencoder demo on the toy image set")
    p.set_defaults(handler=lambda s, out, a: commands.cmd_mae_demo(s, out))

    p = sub.add_parser("toytrain", parents=[common], help="Train on a synthetic task")
    p.add_argument("--task", choices=commands.TOY_TASKS, default=None)
    p.set_defaults(handler=lambda s, out, a: commands.cmd_toytrain(s, out, a.task))

    p = sub.add_parser("syncdemo", parents=[common], help="Simulate a lossy gaze stream and report alignment error")
    p.set_defaults(handler=lambda s, out, a: commands.cmd_syncdemo(s, out))

    p = sub.add_parser("eval", parents=[common], help="Closed-loop evaluation of scripted-episode policies")
    p.add_argument("--run", type=Path, required=True, help="Run directory written by toytrain --task scripted-episode")
    p.set_defaults(handler=lambda s, out, a: commands.cmd_eval(s, out, a.run))
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=str(args.log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        settings = load_settings(args.config, args.set, args.seed)
        out_dir = args.out if args.out is not None else RUNS_DIR / args.command
        out_dir.mkdir(parents=True, exist_ok=True)
        torch.manual_seed(settings.run.seed)
        write_resolved(settings, out_dir)
        args.handler(settings, out_dir, args)
    except DivergenceError as exc:
        logger.error("%s diverged: %s", args.command, exc.diagnostics())
        return exit_code_for(exc)
    except (FoveationError, OSError, ValueError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return exit_code_for(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
