"""Trainable-parameter and inference MAC counts for the three adaptation modes.

MAC convention: one multiply-add per scalar product term, so a d x k
matrix-vector product costs d*k MACs; additions, biases and activations
cost nothing. Counts are per input example.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .network import BranchedNetwork, NetworkConfig, stage_ranks
from .tasks import TaskSpec
from .tree import TaskTree, check_schedule

MAC_CONVENTION = ("1 MAC = one scalar multiply-add; d x k matvec = d*k MACs; "
                  "bias adds, residual adds and nonlinearities = 0 MACs; per input example")
COST_MODES = ("individual", "shared", "progressive")


@dataclass
class CostReport:
    mode: str
    trainable_params: int
    macs: int
    breakdown: list[dict] = field(default_factory=list)

    def __post_init__(self):
        assert self.macs == sum(b["macs"] for b in self.breakdown)
        assert self.trainable_params == sum(b["params"] for b in self.breakdown)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> CostReport:
        return cls(**d)


def rank_unit_params(config: NetworkConfig) -> int:
    """Parameters added by one unit of rank in one adapted layer."""
    return 2 * config.hidden_dim


def head_cost(config: NetworkConfig, spec: TaskSpec) -> tuple[int, int]:
    """(MACs, params) of one task head."""
    d, h, o = config.hidden_dim, config.head_hidden, spec.out_dim
    if h:
        return d * h + h * o, d * h + h + h * o + o
    return d * o, d * o + o


def mode_tree(mode: str, tree: TaskTree | None, stages: int, task_count: int) -> TaskTree:
    if mode == "individual":
        return TaskTree.individual(stages, task_count)
    if mode == "shared":
        return TaskTree.shared(stages, task_count)
    if mode == "progressive":
        if tree is None:
            raise ValueError("progressive mode needs a tree")
        return tree
    raise ValueError(f"unknown cost mode {mode!r}")


def cost_report(config: NetworkConfig, tasks: Sequence[TaskSpec], tree: TaskTree | None, mode: str) -> CostReport:
    T = len(tasks)
    tree = mode_tree(mode, tree, config.stages, T)
    d = config.hidden_dim
    ranks = stage_ranks(tree, config)
    streams0 = len(tree.stages[0])
    parts = [{"part": "stem", "streams": streams0, "macs": streams0 * config.input_dim * d, "params": 0}]
    for s, part in enumerate(tree.stages):
        n = len(part)
        base = n * 2 * d * d
        adapter = 2 * sum(r * (d + d) for r in ranks[s])
        parts.append({"part": f"stage{s}", "streams": n, "ranks": list(ranks[s]),
                      "base_macs": base, "adapter_macs": adapter, "macs": base + adapter, "params": adapter})
    head_macs = head_params = 0
    for spec in tasks:
        m, p = head_cost(config, spec)
        head_macs += m
        head_params += p
    parts.append({"part": "heads", "streams": T, "macs": head_macs, "params": head_params})
    return CostReport(mode, sum(p["params"] for p in parts), sum(p["macs"] for p in parts), parts)


def count_trainable(net: BranchedNetwork) -> int:
    """Adapter ranks times (d + k) over every TGLoRA module, plus head parameters."""
    total = sum(m.rank * (layer.out_features + layer.in_features)
                for layer in net.adapter_layers() for m in layer.modules)
    return total + sum(head_cost(net.config, t)[1] for t in net.tasks)


def count_macs(net: BranchedNetwork, mode: str = "progressive") -> int:
    return cost_report(net.config, net.tasks, net.tree, mode).macs


def tree_for_schedule(schedule: Sequence[int], task_count: int, sim=None) -> TaskTree:
    from .grouping import compute_tree

    s = np.zeros((task_count, task_count)) if sim is None else sim
    return compute_tree(s, schedule)


def schedule_cost_scan(config: NetworkConfig, tasks: Sequence[TaskSpec], schedules: Sequence[Sequence[int]],
                       sim=None) -> dict:
    """Cost columns for each candidate schedule; delta-m is left for training runs to fill."""
    rows, skipped = [], []
    for sched in schedules:
        sched = [int(c) for c in sched]
        problems = check_schedule(sched, len(tasks))
        if len(sched) != config.stages:
            problems.append(f"{len(sched)} stages, network has {config.stages}")
        if problems:
            skipped.append({"schedule": sched, "note": "; ".join(problems)})
            continue
        tree = tree_for_schedule(sched, len(tasks), sim)
        rep = cost_report(config, tasks, tree, "progressive")
        rows.append({"schedule": sched, "delta_m": None, "macs": rep.macs, "params": rep.trainable_params,
                     "stages": [[list(g) for g in p] for p in tree.stages]})
    return {"convention": MAC_CONVENTION, "scan": rows, "skipped": skipped}


def write_cost_json(path: str | Path, reports: Sequence[CostReport], scan: dict | None = None,
                    provenance: dict | None = None) -> None:
    doc = {"convention": MAC_CONVENTION, "reports": [r.to_dict() for r in reports]}
    if scan is not None:
        doc["scan"] = scan["scan"]
        doc["skipped"] = scan["skipped"]
    if provenance:
        doc["provenance"] = provenance
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def read_cost_json(path: str | Path) -> tuple[list[CostReport], dict]:
    doc = json.loads(Path(path).read_text())
    return [CostReport.from_dict(r) for r in doc["reports"]], doc


def format_table(reports: Sequence[CostReport]) -> str:
    lines = [f"# {MAC_CONVENTION}", f"{'mode':<12} {'params':>10} {'MACs':>12}"]
    for r in reports:
        lines.append(f"{r.mode:<12} {r.trainable_params:>10d} {r.macs:>12d}")
    return "\n".join(lines)
