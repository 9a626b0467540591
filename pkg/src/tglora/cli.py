"""Command line entry point: ``tglora <subcommand> [--config PATH] [--run-dir PATH] [--seed N]``.

Exit codes: 0 success, 1 invalid config or arguments, 2 missing prerequisite artifact.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness
from .config import ConfigError, load_config
from .harness import MissingArtifact, Run

SUBCOMMANDS = ("gen-data", "tune-heads", "similarity", "group", "train", "eval", "cost", "ablate-swap", "report")
TRAIN_MODES = ("reference", "individual", "shared", "progressive")


def _task_id(token: str, names: list[str]) -> int:
    if token in names:
        return names.index(token)
    try:
        t = int(token)
    except ValueError:
        raise ValueError(f"unknown task {token!r}; expected one of {names} or an index") from None
    if not 0 <= t < len(names):
        raise ValueError(f"task index {t} out of range")
    return t


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tglora", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment config")
    common.add_argument("--run-dir", type=Path, help="run directory (default <root>/<experiment>/<seed>)")
    common.add_argument("--seed", type=int, help="seed override (default: first configured seed)")
    for name in SUBCOMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "train":
            sp.add_argument("--mode", choices=TRAIN_MODES, action="append",
                            help="mode to train; repeatable (default: all configured modes)")
        if name == "ablate-swap":
            sp.add_argument("--swap", nargs=2, metavar=("A", "B"), help="two task names or indices")
            sp.add_argument("--stages", type=int, nargs="+", help="stage indices to swap at")
        if name == "report":
            sp.add_argument("--experiment-dir", type=Path, help="directory holding <seed>/ runs")
    return p


def _dispatch(args: argparse.Namespace) -> int:
    cfg = load_config(args.config)
    if args.command == "report":
        exp_dir = args.experiment_dir or harness.run_root() / cfg.experiment
        table, series = harness.report(exp_dir)
        print(table.read_text(), end="")
        print(f"wrote {table} and {series}")
        return 0
    run = Run.resolve(cfg, args.seed, args.run_dir)
    with run.lock():
        if args.command == "gen-data":
            data = harness.gen_data(run)
            print(f"wrote {run.path('data')} ({data.n_train} train, {data.x_val.shape[0]} val)")
        elif args.command == "tune-heads":
            trace = harness.tune_heads_step(run)
            print(f"head loss {trace[0]:.6f} -> {trace[-1]:.6f}")
        elif args.command == "similarity":
            sim = harness.similarity_step(run)
            print(sim.to_csv(), end="")
        elif args.command == "group":
            result = harness.group_step(run)
            print(result.to_json(), end="")
        elif args.command == "train":
            data = harness.load_data(run)
            modes = args.mode or list(cfg.modes)
            for m in sorted(modes, key=lambda m: m != "reference"):
                rec = harness.train_step(run, m, data)
                print(json.dumps(rec.metrics_json()))
        elif args.command == "eval":
            for label, m in harness.eval_step(run).items():
                print(label, json.dumps(m["per_task"]), m["delta_m_percent"])
        elif args.command == "cost":
            print(harness.cost_step(run))
        elif args.command == "ablate-swap":
            names = [t.name for t in run.generator().task_specs()]
            swap = [_task_id(s, names) for s in args.swap] if args.swap else None
            rec = harness.ablate_swap_step(run, swap, args.stages)
            print(json.dumps(rec.metrics_json()))
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MissingArtifact as exc:
        print(f"error: missing artifact: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
