"""Command line front end.

Exit codes: 0 when every operation and mathematical check passes, 1 when
a check fails, 2 for usage or configuration errors.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, InvalidInput
from .harness import (ExperimentConfig, load_experiment_config, run_convergence,
                      run_gen_data, run_report, run_sigma_sweep, run_train,
                      run_variance_study)


def _add_common(parser: argparse.ArgumentParser, sampler: bool = False):
    parser.add_argument("--config", type=Path, help="JSON or TOML experiment config")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed (and seed list)")
    parser.add_argument("--out", type=Path, default=None, help="output directory")
    parser.add_argument("--trials", type=int, default=None,
                        help="override the number of Monte Carlo trials")
    parser.add_argument("--jobs", type=int, default=None,
                        help="worker processes; results are identical for any value")
    if sampler:
        parser.add_argument("--sampler", choices=["ns", "sg", "sag", "all"],
                            default=None, help="restrict to one sampler")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stratpix",
        description="Stratified and antithetic pixel sampling experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic labeled lattice")
    _add_common(p)

    p = sub.add_parser("variance", help="analytic and Monte Carlo variance study")
    _add_common(p, sampler=True)

    p = sub.add_parser("convergence", help="multi-seed SGD convergence study")
    _add_common(p, sampler=True)
    p.add_argument("--sigma-sweep", action="store_true",
                   help="run the noise-controlled quadratic sweep instead")

    p = sub.add_parser("train", help="single training run with step logs")
    _add_common(p, sampler=True)

    p = sub.add_parser("report", help="summarize results in a directory")
    p.add_argument("--out", type=Path, required=True, help="results directory")

    return parser


def _load_config(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config is required for this command")
    config = load_experiment_config(args.config)
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
        updates["seeds"] = (args.seed,)
    if getattr(args, "trials", None) is not None:
        updates["trials"] = args.trials
    if getattr(args, "jobs", None) is not None:
        updates["jobs"] = args.jobs
    if getattr(args, "sampler", None) not in (None, "all"):
        updates["samplers"] = (args.sampler,)
    if getattr(args, "out", None) is not None:
        updates["out"] = str(args.out)
    if updates:
        config = replace(config, **updates)
    return config


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors and 0 on --help; keep its code.
        return int(exc.code or 0)

    try:
        if args.command == "report":
            return run_report(args.out)
        config = _load_config(args)
        out_dir = Path(config.out)
        if args.command == "gen-data":
            return run_gen_data(config, out_dir)
        if args.command == "variance":
            return run_variance_study(config, out_dir)
        if args.command == "convergence":
            if args.sigma_sweep:
                return run_sigma_sweep(config, out_dir)
            return run_convergence(config, out_dir)
        if args.command == "train":
            sampler = getattr(args, "sampler", None)
            if sampler == "all":
                sampler = None
            return run_train(config, out_dir, sampler=sampler, seed=args.seed)
    except (ConfigError, InvalidInput) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
