"""Run every pipeline step for each configured seed, then aggregate.

    python scripts/run_main_claims.py [--config configs/main_claims.yaml] [--root runs]
"""

import argparse
import os
import time
from pathlib import Path

from tglora import harness
from tglora.config import load_config


def main() -> None:
    p = argparse.ArgumentParser()
    p.add_argument("--config", type=Path, default=Path(__file__).parent.parent / "configs" / "main_claims.yaml")
    p.add_argument("--root", type=Path, help="run root (defaults to $TGLORA_RUN_ROOT or ./runs)")
    p.add_argument("--seeds", type=int, nargs="+")
    args = p.parse_args()
    if args.root:
        os.environ[harness.RUN_ROOT_ENV] = str(args.root)
    cfg = load_config(args.config)
    for seed in args.seeds or cfg.seeds:
        t0 = time.perf_counter()
        run = harness.Run.resolve(cfg, seed)
        records = harness.run_all(run, ablate=cfg.ablation.swap is not None)
        groups = harness.load_tree(run).stages
        print(f"seed {seed}: tree {[[list(g) for g in s] for s in groups]} ({time.perf_counter() - t0:.0f}s)")
        for label, rec in records.items():
            print(f"  {label:<12} delta_m {rec.delta_m:+8.3f}  params {rec.trainable_params}")
    table, series = harness.report(harness.run_root() / cfg.experiment)
    print(table.read_text(), end="")


if __name__ == "__main__":
    main()
