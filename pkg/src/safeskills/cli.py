"""Command-line entry point: ``python3 -m safeskills <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import harness
from .config import ConfigError, build_config, load_config
from .nn import CheckpointError, TrainingError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_NUMERIC = 4


def _config(args):
    if args.config:
        return load_config(args.config, preset=args.preset, seed=args.seed)
    return build_config({}, preset=args.preset, seed=args.seed)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML experiment config (defaults to the preset alone)")
    p.add_argument("--preset", choices=["desk", "paper"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None,
                   help=f"output root (overrides ${harness.OUTPUT_ENV} and the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="safeskills", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one skill with DDPG")
    p.add_argument("skill", choices=["stir", "spill", "slide", "overturn", "compound"])
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate one condition")
    p.add_argument("condition")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("recovery", help="time risk recovery from each initial procedure")
    p.add_argument("condition", nargs="?", default="L4-U")
    p.add_argument("--episodes", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("extend", help="grow a trained library into a larger one without retraining")
    p.add_argument("base", help="condition whose manifest is extended, e.g. L2-F")
    p.add_argument("target", help="condition to assemble, e.g. L4-U")
    _add_common(p)

    p = sub.add_parser("trace", help="record one particle's trajectory under a condition")
    p.add_argument("condition")
    p.add_argument("--particle", type=int, default=None)
    p.add_argument("--steps", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("compare", help="orderings between evaluated conditions")
    p.add_argument("dir")

    p = sub.add_parser("pipeline", help="train everything, evaluate, trace and compare")
    _add_common(p)
    return parser


def run(args) -> int:
    if args.command == "compare":
        report = harness.cmd_compare(args.dir)
        for row in report["checks"]:
            name, va, vb, holds = row
            state = {1: "holds", 0: "violated", "": "n/a"}[holds]
            print(f"{state:9s} {name}  ({va} vs {vb})")
        return EXIT_OK

    cfg = _config(args)
    root = harness.output_root(cfg, args.out)
    if args.command == "train":
        print(json.dumps(harness.cmd_train(args.skill, cfg, root), indent=2))
    elif args.command == "eval":
        res = harness.cmd_eval(args.condition, cfg, root, args.episodes, args.steps)
        print(json.dumps(res.summary, indent=2))
    elif args.command == "recovery":
        out = harness.cmd_recovery(args.condition, cfg, root, args.episodes)
        for risk, steps in out.items():
            print(f"{risk}: recovered in {harness.recovery_rate(steps):.0%} of {len(steps)} episodes")
    elif args.command == "extend":
        print(json.dumps(harness.extend_library(args.base, args.target, cfg, root), indent=2))
    elif args.command == "trace":
        path = harness.cmd_trace(args.condition, cfg, args.particle, root, args.steps)
        print(f"{path}  hull area {harness.trace_area(path):.6g} m^2")
    elif args.command == "pipeline":
        report = harness.run_pipeline(cfg, root)
        for row in report["compare"]["checks"]:
            print(row)
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, CheckpointError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (TrainingError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
