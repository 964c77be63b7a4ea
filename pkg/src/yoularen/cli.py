"""Command-line entry point: run experiments from config files, compare runs."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ConfigError, NumericalError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _load_yaml(path: str) -> dict:
    import yaml

    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    try:
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" (line {mark.line + 1}, column {mark.column + 1})" if mark else ""
        raise ConfigError(f"invalid YAML in {path}{where}: {exc}") from exc
    if cfg is None:
        cfg = {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return cfg


def _cmd_run(args) -> int:
    from .experiments import resolve_config, run_experiment

    cfg = _load_yaml(args.config)
    resolved = resolve_config(cfg, scale=args.scale, seed=args.seed,
                              output_dir=args.out)
    run_experiment(resolved, quiet=args.quiet)
    return EXIT_OK


def _cmd_compare(args) -> int:
    from .experiments import compare_runs

    table = compare_runs(args.run_dirs, out_csv=args.out)
    print(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="yoularen",
        description="Train and evaluate robustly stabilizing feedback policies "
                    "on the uncertain cart-pole benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment from a YAML config")
    run_p.add_argument("config", help="path to the experiment config file")
    run_p.add_argument("--scale", choices=["desk", "paper"], default=None,
                       help="override the config's scale preset")
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the config's master seed")
    run_p.add_argument("--out", default=None,
                       help="override the config's output directory")
    run_p.add_argument("--quiet", action="store_true",
                       help="suppress progress output")
    run_p.set_defaults(func=_cmd_run)

    cmp_p = sub.add_parser("compare", help="tabulate metrics from finished runs")
    cmp_p.add_argument("run_dirs", nargs="+", help="run output directories")
    cmp_p.add_argument("--out", default=None, help="also write a merged CSV here")
    cmp_p.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    import torch

    torch.set_num_threads(1)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses exit code 2 for usage errors already
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
