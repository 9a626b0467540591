import numpy as np
import pytest

from tglora.network import NetworkConfig, build_network
from tglora.seeding import make_rng
from tglora.tasks import TaskSpec
from tglora.tree import TaskTree


def random_tree(rng: np.random.Generator, stages: int, tasks: int) -> TaskTree:
    """Random refinement chain: each stage splits some groups of the previous one."""
    part = [list(range(tasks))]
    out = [part]
    for _ in range(stages - 1):
        nxt = []
        for g in part:
            if len(g) > 1 and rng.random() < 0.5:
                perm = list(rng.permutation(g))
                cut = int(rng.integers(1, len(g)))
                nxt += [sorted(perm[:cut]), sorted(perm[cut:])]
            else:
                nxt.append(g)
        part = nxt
        out.append(part)
    return TaskTree.from_lists(out)


def tiny_config(**kw) -> NetworkConfig:
    base = dict(input_dim=3, hidden_dim=4, stages=2, head_hidden=3, rank=2, alpha=4.0, dropout=0.0)
    base.update(kw)
    return NetworkConfig(**base)


def tiny_tasks(n: int, classification=()) -> list[TaskSpec]:
    return [TaskSpec(f"t{i}", "cross_entropy" if i in classification else "mse", 1.0, 2) for i in range(n)]


def randomize_adapters(net, seed: int, scale: float = 0.5) -> None:
    """Non-zero B values keyed by parameter name, so shared groups match across networks."""
    for name, t in net.store:
        if name.endswith(".B"):
            t.data[...] = make_rng(seed, name).normal(0.0, scale, t.shape)


@pytest.fixture
def small_net():
    tree = TaskTree.from_lists([[[0, 1, 2]], [[0, 1], [2]]])
    return build_network(tiny_config(), tiny_tasks(3), tree, seed=0)
