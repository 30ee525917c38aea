"""Command line entry point: ``dgtd run | validate | list-presets``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import ConfigError, list_presets, resolve_config, run, write_outputs


def parse_seeds(text: str) -> list[int]:
    """``"0..4"`` (inclusive range), ``"0,2,5"`` or a single integer."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        lo, hi = int(lo), int(hi)
        if hi < lo:
            raise argparse.ArgumentTypeError(f"empty seed range {text!r}")
        return list(range(lo, hi + 1))
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad seed list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dgtd", description="Distributional gradient TD experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-seed progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a preset or a JSON config and write CSV logs")
    p_run.add_argument("--preset", help="preset name (see list-presets)")
    p_run.add_argument("--config", help="JSON file; its fields override the preset")
    p_run.add_argument("--seeds", type=parse_seeds, help="e.g. 0..4 or 0,3,7")
    p_run.add_argument("--out", default="runs", help="output directory (default: runs)")
    p_run.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted field assignment, value parsed as JSON; repeatable")

    p_val = sub.add_parser("validate", help="check a JSON config and print the resolved form")
    p_val.add_argument("--config", required=True)
    p_val.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")

    sub.add_parser("list-presets", help="print the available preset names")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    if args.command == "list-presets":
        for name in list_presets():
            print(name)
        return 0

    try:
        if args.command == "validate":
            cfg = resolve_config(config_path=args.config, overrides=args.override)
            print(cfg.to_json())
            return 0
        if args.preset is None and args.config is None:
            print("error: run needs --preset or --config", file=sys.stderr)
            return 2
        cfg = resolve_config(args.preset, args.config, args.override, args.seeds)
    except ConfigError as exc:
        for key, msg in exc.errors.items():
            print(f"config error: {key}: {msg}", file=sys.stderr)
        return 2
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2

    log = run(cfg)
    paths = write_outputs(log, cfg, Path(args.out))
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
