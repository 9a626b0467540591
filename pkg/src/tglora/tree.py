"""Task partitions per stage and the tree constraints between stages.

Stages are ordered input-side first. Task ids are non-negative integers.
Groups may split toward the decoders but never merge, and a stage never
has fewer groups than the one before it.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

Partition = tuple[tuple[int, ...], ...]


class PartitionError(ValueError):
    pass


def canonical(partition: Iterable[Iterable[int]]) -> Partition:
    """Members sorted, groups ordered by their smallest member."""
    groups = [tuple(sorted(int(t) for t in g)) for g in partition]
    return tuple(sorted(groups))


def check_partition(partition: Iterable[Iterable[int]], task_count: int) -> list[str]:
    problems = []
    seen: dict[int, int] = {}
    for g in partition:
        g = list(g)
        if not g:
            problems.append("empty group")
        for t in g:
            seen[t] = seen.get(t, 0) + 1
    missing = [t for t in range(task_count) if t not in seen]
    dup = sorted(t for t, c in seen.items() if c > 1)
    extra = sorted(t for t in seen if not 0 <= t < task_count)
    if missing:
        problems.append(f"missing tasks {missing}")
    if dup:
        problems.append(f"duplicated tasks {dup}")
    if extra:
        problems.append(f"unknown tasks {extra}")
    return problems


def validate_partition(partition, task_count: int) -> Partition:
    problems = check_partition(partition, task_count)
    if problems:
        raise PartitionError("invalid partition: " + "; ".join(problems))
    return canonical(partition)


@dataclass(frozen=True)
class TaskTree:
    stages: tuple[Partition, ...]

    @classmethod
    def from_lists(cls, stages: Sequence[Sequence[Iterable[int]]]) -> TaskTree:
        return cls(tuple(canonical(s) for s in stages))

    @classmethod
    def shared(cls, stage_count: int, task_count: int) -> TaskTree:
        return cls.from_lists([[range(task_count)]] * stage_count)

    @classmethod
    def individual(cls, stage_count: int, task_count: int) -> TaskTree:
        return cls.from_lists([[[t] for t in range(task_count)]] * stage_count)

    @property
    def stage_count(self) -> int:
        return len(self.stages)

    @property
    def task_count(self) -> int:
        return sum(len(g) for g in self.stages[0]) if self.stages else 0

    @property
    def counts(self) -> list[int]:
        return [len(s) for s in self.stages]

    def group_of(self, stage: int, task: int) -> int:
        for i, g in enumerate(self.stages[stage]):
            if task in g:
                return i
        raise KeyError(f"task {task} not in stage {stage}")

    def parent(self, stage: int, group: int) -> int:
        """Index of the group in ``stage - 1`` that contains ``stage``'s group."""
        return self.group_of(stage - 1, self.stages[stage][group][0])

    def swap_tasks(self, a: int, b: int, stages: Iterable[int]) -> TaskTree:
        """Exchange the group memberships of tasks ``a`` and ``b`` at the given stages."""
        swap = {a: b, b: a}
        chosen = set(stages)
        new = []
        for s, part in enumerate(self.stages):
            if s in chosen:
                part = canonical([swap.get(t, t) for t in g] for g in part)
            new.append(part)
        return TaskTree(tuple(new))

    def to_json(self) -> str:
        return json.dumps({"stages": [[list(g) for g in s] for s in self.stages]})

    @classmethod
    def from_json(cls, text: str) -> TaskTree:
        return cls.from_lists(json.loads(text)["stages"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> TaskTree:
        return cls.from_json(Path(path).read_text())


def validate_tree(tree: TaskTree | Sequence, task_count: int) -> list[str]:
    """Every partition, monotonicity and refinement violation; empty when valid."""
    stages = tree.stages if isinstance(tree, TaskTree) else [list(s) for s in tree]
    violations = []
    if not stages:
        return ["tree has no stages"]
    sets = []
    for s, part in enumerate(stages):
        for p in check_partition(part, task_count):
            violations.append(f"stage {s}: {p}")
        sets.append([frozenset(g) for g in part])
    for s in range(1, len(stages)):
        if len(sets[s]) < len(sets[s - 1]):
            violations.append(f"stage {s}: monotonicity violated, {len(sets[s])} groups after "
                              f"{len(sets[s - 1])} in stage {s - 1}")
        for g in sets[s]:
            holders = [h for h in sets[s - 1] if g <= h]
            if len(holders) != 1:
                violations.append(f"stage {s}: refinement violated, group {sorted(g)} is not inside "
                                  f"exactly one group of stage {s - 1}")
    return violations


def schedule_groups(stage_count: int, task_count: int) -> list[int]:
    """First stage shared, last stage task-specific, one fewer group per stage backwards."""
    if stage_count < 1 or task_count < 1:
        raise ValueError("stage_count and task_count must be >= 1")
    counts = [0] * stage_count
    counts[-1] = task_count
    for s in range(stage_count - 2, -1, -1):
        counts[s] = max(1, counts[s + 1] - 1)
    if stage_count == 1:
        if task_count > 1:
            warnings.warn("single-stage schedule: the stage is task-specific, not shared", stacklevel=2)
        return counts
    counts[0] = 1
    return counts


def check_schedule(schedule: Sequence[int], task_count: int) -> list[str]:
    problems = []
    for s, c in enumerate(schedule):
        if not 1 <= c <= task_count:
            problems.append(f"stage {s}: {c} groups outside [1, {task_count}]")
    for s in range(1, len(schedule)):
        if schedule[s] < schedule[s - 1]:
            problems.append(f"stage {s}: group count decreases toward the decoders")
    return problems
