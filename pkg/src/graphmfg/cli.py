"""Command line entry points.

    graphmfg run <config.json> [--suite S] [--jobs N] [--out DIR]
    graphmfg validate <config.json>
    graphmfg list-generators

Exit codes: 0 all hard checks pass, 1 suite assertion failure, 2 config
error (with a line-anchored message when the offending key is locatable).
"""
from __future__ import annotations

import argparse
import json
import sys

from .config import SUITES, ConfigError, load_config
from .graphs import GENERATORS
from .suites import run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="graphmfg",
        description="Mean-field-game solver and verification suites on "
                    "finite weighted graphs")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the configured suites")
    p_run.add_argument("config", help="experiment config (JSON)")
    p_run.add_argument("--suite", choices=SUITES, action="append",
                       help="restrict to this suite (repeatable)")
    p_run.add_argument("--jobs", type=int, default=1,
                       help="suite-level parallelism")
    p_run.add_argument("--out", default=None,
                       help="output directory (overrides the config)")

    p_val = sub.add_parser("validate", help="parse and validate a config")
    p_val.add_argument("config", help="experiment config (JSON)")

    sub.add_parser("list-generators", help="list built-in graph generators")
    return parser


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc.render(args.config)}", file=sys.stderr)
        return 2
    suites = cfg.suites
    if args.suite:
        suites = [s for s in cfg.suites if s in args.suite]
        if not suites:
            print(f"error: none of {args.suite} are enabled by the config "
                  f"(enabled: {', '.join(cfg.suites)})", file=sys.stderr)
            return 2
    out_dir = args.out if args.out else cfg.output_dir
    return run_experiment(cfg, out_dir, suites=suites, jobs=max(1, args.jobs),
                          config_path=args.config)


def cmd_validate(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(f"error: {exc.render(args.config)}", file=sys.stderr)
        return 2
    print(f"OK: graph n={cfg.graph.n} ({cfg.graph.n_edges} edges), "
          f"model {cfg.model['family']}, horizon {cfg.horizon}, "
          f"{len(cfg.initials)} initial point(s), "
          f"suites: {', '.join(cfg.suites)}")
    return 0


def cmd_list_generators(_args) -> int:
    print(json.dumps(GENERATORS, indent=1, sort_keys=True))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "validate":
        return cmd_validate(args)
    return cmd_list_generators(args)


if __name__ == "__main__":
    sys.exit(main())
