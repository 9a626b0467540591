"""Partition scoring, exact partition search and greedy group merging.

A task's score inside its group is its mean similarity to the other
members (zero for singletons); a partition scores the sum over tasks.
Trees are built from the decoders backwards: the last stage is searched
exactly, earlier stages merge groups of the next stage greedily.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .tree import Partition, TaskTree, canonical, check_schedule, validate_partition, validate_tree

MAX_EXACT_TASKS = 12
TIE_TOL = 1e-12


class CapacityError(ValueError):
    pass


def _sim_values(sim) -> np.ndarray:
    return np.asarray(getattr(sim, "values", sim), dtype=np.float64)


@dataclass
class PartitionScore:
    partition: Partition
    task_scores: dict[int, float]
    total: float


def _group_scores(s: np.ndarray, group: Sequence[int]) -> dict[int, float]:
    if len(group) == 1:
        return {group[0]: 0.0}
    out = {}
    for t in group:
        acc = 0.0
        for u in group:
            if u != t:
                acc += s[t, u]
        out[t] = acc / (len(group) - 1)
    return out


def partition_score(sim, partition) -> PartitionScore:
    s = _sim_values(sim)
    part = validate_partition(partition, s.shape[0])
    scores: dict[int, float] = {}
    total = 0.0
    for g in part:
        gs = _group_scores(s, g)
        scores.update(gs)
        for t in g:
            total += gs[t]
    return PartitionScore(part, scores, total)


def _score(s: np.ndarray, part: Partition) -> float:
    total = 0.0
    for g in part:
        if len(g) > 1:
            for t in g:
                acc = 0.0
                for u in g:
                    if u != t:
                        acc += s[t, u]
                total += acc / (len(g) - 1)
    return total


def restricted_growth_strings(n: int, blocks: int | None = None) -> Iterator[list[int]]:
    """Every restricted growth string of length ``n`` (optionally with exactly ``blocks`` blocks)."""
    if n == 0:
        if not blocks:
            yield []
        return
    a = [0] * n

    def rec(i: int, used: int):
        if blocks is not None and used + (n - i) < blocks:
            return
        if i == n:
            if blocks is None or used == blocks:
                yield list(a)
            return
        top = used if blocks is None else min(used, blocks - 1)
        for v in range(top + 1):
            a[i] = v
            yield from rec(i + 1, max(used, v + 1))

    a[0] = 0
    yield from rec(1, 1)


def set_partitions(n: int, blocks: int | None = None) -> Iterator[Partition]:
    for rgs in restricted_growth_strings(n, blocks):
        groups: list[list[int]] = [[] for _ in range(max(rgs) + 1)]
        for t, b in enumerate(rgs):
            groups[b].append(t)
        yield tuple(tuple(g) for g in groups)


def _better(score: float, part: Partition, best_score: float, best: Partition | None) -> tuple[bool, bool]:
    """(replace, was_tie) under score-then-canonical-order comparison."""
    if best is None:
        return True, False
    tol = TIE_TOL * max(1.0, abs(best_score))
    if score > best_score + tol:
        return True, False
    if abs(score - best_score) <= tol:
        return part < best, True
    return False, False


def best_partition_with_ties(sim, group_count: int | None) -> tuple[Partition, int]:
    s = _sim_values(sim)
    n = s.shape[0]
    if n > MAX_EXACT_TASKS:
        raise CapacityError(f"exact search is limited to {MAX_EXACT_TASKS} tasks (got {n}); "
                            "use greedy merging (merge_task_groups) from singletons instead")
    if group_count is not None and not 1 <= group_count <= n:
        raise ValueError(f"group count {group_count} outside [1, {n}]")
    best, best_score, ties = None, -np.inf, 0
    for part in set_partitions(n, group_count):
        # RGS partitions are already canonical: groups ordered by first member.
        sc = _score(s, part)
        replace, tie = _better(sc, part, best_score, best)
        ties += tie
        if replace:
            best, best_score = part, max(sc, best_score) if tie else sc
    return best, ties


def best_partition(sim, group_count: int | None) -> Partition:
    """Highest-scoring partition with exactly ``group_count`` groups (any count if None)."""
    return best_partition_with_ties(sim, group_count)[0]


def merge_steps(sim, partition, target: int) -> Iterator[tuple[Partition, float, int]]:
    """Yield (partition, score, ties) after each greedy merge down to ``target`` groups."""
    s = _sim_values(sim)
    q = validate_partition(partition, s.shape[0])
    if target < 1:
        raise ValueError("target group count must be >= 1")
    if target >= len(q):
        raise ValueError(f"target {target} must be below the current {len(q)} groups")
    while len(q) > target:
        best, best_score, best_pair, ties = None, -np.inf, None, 0
        for i, j in combinations(range(len(q)), 2):
            cand = canonical([g for k, g in enumerate(q) if k not in (i, j)] + [q[i] + q[j]])
            sc = _score(s, cand)
            pair = canonical([q[i] + q[j]])[0]
            tol = TIE_TOL * max(1.0, abs(best_score)) if best is not None else 0.0
            if best is None or sc > best_score + tol:
                best, best_score, best_pair = cand, sc, pair
            elif abs(sc - best_score) <= tol:
                ties += 1
                if pair < best_pair:
                    best, best_pair = cand, pair
        q = best
        yield q, best_score, ties


def merge_task_groups(sim, partition, target: int) -> Partition:
    """Greedy pairwise merging of task groups until ``target`` groups remain."""
    q = None
    for q, _, _ in merge_steps(sim, partition, target):
        pass
    return q


@dataclass
class GroupingResult:
    tree: TaskTree
    schedule: list[int]
    scores: list[float]
    tie_breaks: int = 0
    mode: str = "constrained"

    def to_json(self) -> str:
        return json.dumps({
            "schedule": self.schedule,
            "stages": [[list(g) for g in s] for s in self.tree.stages],
            "scores": [float(x) for x in self.scores],
            "tie_breaks": self.tie_breaks,
            "mode": self.mode,
        }, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> GroupingResult:
        d = json.loads(text)
        return cls(TaskTree.from_lists(d["stages"]), list(d["schedule"]), list(d["scores"]),
                   int(d["tie_breaks"]), d.get("mode", "constrained"))

    def save(self, path: str | Path, provenance: dict | None = None) -> None:
        text = self.to_json()
        if provenance:
            d = json.loads(text)
            d["provenance"] = provenance
            text = json.dumps(d, indent=2) + "\n"
        Path(path).write_text(text)

    @classmethod
    def load(cls, path: str | Path) -> GroupingResult:
        return cls.from_json(Path(path).read_text())


def compute_grouping(sim, schedule: Sequence[int], mode: str = "constrained") -> GroupingResult:
    """Build the per-stage task tree from the decoders backwards.

    ``mode="constrained"`` searches the last stage with exactly
    ``schedule[-1]`` groups; ``"unconstrained"`` takes the best partition of
    any size and caps earlier stages at its group count.
    """
    s = _sim_values(sim)
    n = s.shape[0]
    schedule = list(schedule)
    problems = check_schedule(schedule, n)
    if problems:
        raise ValueError("invalid schedule: " + "; ".join(problems))
    if mode not in ("constrained", "unconstrained"):
        raise ValueError(f"unknown grouping mode {mode!r}")
    ties = 0
    if schedule[-1] == n and mode == "constrained":
        last = canonical([t] for t in range(n))
    else:
        last, ties = best_partition_with_ties(s, schedule[-1] if mode == "constrained" else None)
        schedule = [min(c, len(last)) for c in schedule]
    stages = [last]
    for count in reversed(schedule[:-1]):
        nxt = stages[0]
        if count == len(nxt):
            stages.insert(0, nxt)
            continue
        part = nxt
        for part, _, t in merge_steps(s, nxt, count):
            ties += t
        stages.insert(0, part)
    tree = TaskTree(tuple(stages))
    violations = validate_tree(tree, n)
    assert not violations, violations
    return GroupingResult(tree, schedule, [_score(s, p) for p in tree.stages], ties, mode)


def compute_tree(sim, schedule: Sequence[int], mode: str = "constrained") -> TaskTree:
    return compute_grouping(sim, schedule, mode).tree
