"""Inference MACs and trainable parameters for candidate stage schedules.

    python scripts/schedule_scan.py [--config configs/main_claims.yaml]
"""

import argparse
from pathlib import Path

from tglora.config import load_config
from tglora.cost import MAC_CONVENTION, cost_report, format_table, schedule_cost_scan
from tglora.harness import Run
from tglora.tree import TaskTree, schedule_groups


def main() -> None:
    p = argparse.ArgumentParser()
    p.add_argument("--config", type=Path, default=Path(__file__).parent.parent / "configs" / "main_claims.yaml")
    args = p.parse_args()
    cfg = load_config(args.config)
    tasks = Run.resolve(cfg, 0).generator().task_specs()
    S, T = cfg.model.stages, len(tasks)
    scan = schedule_cost_scan(cfg.model, tasks, cfg.cost.schedules or [schedule_groups(S, T)])
    print(f"# {MAC_CONVENTION}")
    print(f"{'schedule':<16} {'params':>8} {'MACs':>10}  tree")
    for row in scan["scan"]:
        print(f"{str(row['schedule']):<16} {row['params']:>8d} {row['macs']:>10d}  {row['stages']}")
    for row in scan["skipped"]:
        print(f"{str(row['schedule']):<16} skipped: {row['note']}")
    print()
    print(format_table([cost_report(cfg.model, tasks, TaskTree.shared(S, T), "shared"),
                        cost_report(cfg.model, tasks, TaskTree.individual(S, T), "individual")]))


if __name__ == "__main__":
    main()
