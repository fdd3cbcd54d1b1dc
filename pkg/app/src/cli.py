"""Command line entry point.

    avatar-studio <command> [--config FILE] [--override section.key=value ...] [options]

Exit codes: 0 on success, 2 on invalid input (config, dataset, checkpoint or argument
errors), 1 on any other failure.
"""

import argparse
import sys
from typing import Any, Dict, List, Optional, Sequence

from pydantic import ValidationError

from app.src.schemas.base import CommandName
from app.src.schemas.config import ConfigError, config_keys, load_config
from app.src.studios.avatar_studio import AvatarStudio

EXIT_OK: int = 0
EXIT_FAILURE: int = 1
EXIT_INVALID_INPUT: int = 2

COMMAND_SECTIONS: Dict[CommandName, List[str]] = {
    CommandName.TRAIN: [
        "paths",
        "body",
        "splats",
        "render",
        "densify",
        "prune",
        "regularizer",
        "trainer",
        "logging",
    ],
    CommandName.RENDER: ["paths", "render", "logging"],
    CommandName.EVAL: ["paths", "render", "trainer", "logging"],
    CommandName.FIT2D: ["paths", "fit2d", "logging"],
    CommandName.STITCH: ["paths", "stitch", "logging"],
    CommandName.MAKE_SYNTHETIC: ["paths", "synthetic", "logging"],
}

COMMAND_HELP: Dict[CommandName, str] = {
    CommandName.TRAIN: "train an avatar on a dataset directory",
    CommandName.RENDER: "render a checkpoint for poses or an animation",
    CommandName.EVAL: "score a checkpoint on held-out frames",
    CommandName.FIT2D: "fit poses to 2D keypoints",
    CommandName.STITCH: "stitch glosses into an animation",
    CommandName.MAKE_SYNTHETIC: "write the synthetic toy dataset",
}


def _keys_epilog(command: CommandName) -> str:
    keys: List[str] = config_keys(COMMAND_SECTIONS[command])
    return "config keys read:\n" + "\n".join(f"  {key}" for key in keys)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="avatar-studio", description=__doc__.splitlines()[0])
    commands = parser.add_subparsers(dest="command", required=True, metavar="command")
    for command in CommandName:
        sub = commands.add_parser(
            command.value,
            help=COMMAND_HELP[command],
            epilog=_keys_epilog(command),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        sub.add_argument("--config", help="TOML config file")
        sub.add_argument(
            "--override",
            "-o",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="dotted config override, repeatable",
        )
        sub.add_argument("--run-id", help="journal file suffix (default: timestamp)")
        if command in (CommandName.TRAIN, CommandName.EVAL, CommandName.FIT2D, CommandName.RENDER):
            sub.add_argument("--dataset", help="dataset directory (default: paths.dataset)")
        if command in (CommandName.EVAL, CommandName.RENDER):
            sub.add_argument("--checkpoint", help="checkpoint directory (default: paths.checkpoint)")
        if command == CommandName.RENDER:
            sub.add_argument("--poses", help="pose file or animation file; renders the dataset frames when omitted")
            sub.add_argument("--cameras", help="camera file, one camera or one per pose")
            sub.add_argument("--outdir", help="PNG directory (default: <paths.output>/renders)")
        if command == CommandName.STITCH:
            sub.add_argument("tokens", nargs="+", help="words or gloss names")
            sub.add_argument("--gloss-dir", help="gloss store (default: <paths.dataset>/glosses)")
            sub.add_argument("--output", help="animation file (default: <paths.output>/animation.json)")
        if command == CommandName.MAKE_SYNTHETIC:
            sub.add_argument("--outdir", help="dataset directory (default: paths.dataset)")
            sub.add_argument("--seed", type=int, help="shortcut for --override synthetic.seed=SEED")
    return parser


def stage_kwargs(args: argparse.Namespace) -> Dict[str, Any]:
    """Maps parsed flags onto stage keyword arguments."""
    command = CommandName(args.command)
    names: Dict[str, str] = {
        "dataset": "dataset_dir",
        "checkpoint": "checkpoint",
        "poses": "poses",
        "cameras": "cameras",
        "gloss_dir": "gloss_dir",
        "output": "output",
    }
    kwargs: Dict[str, Any] = {
        target: getattr(args, flag) for flag, target in names.items() if getattr(args, flag, None) is not None
    }
    if getattr(args, "outdir", None) is not None:
        kwargs["output_dir" if command == CommandName.MAKE_SYNTHETIC else "outdir"] = args.outdir
    if command == CommandName.STITCH:
        kwargs["tokens"] = list(args.tokens)
    return kwargs


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    command = CommandName(args.command)
    overrides: List[str] = list(args.override)
    if getattr(args, "seed", None) is not None:
        overrides.append(f"synthetic.seed={args.seed}")
    try:
        config = load_config(args.config, overrides)
        studio = AvatarStudio(config=config)
        studio.run(command, run_id=args.run_id, **stage_kwargs(args))
    except (ConfigError, ValidationError, ValueError) as e:
        print(f"avatar-studio {command.value}: {e}", file=sys.stderr)
        return EXIT_INVALID_INPUT
    except Exception as e:
        print(f"avatar-studio {command.value} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
