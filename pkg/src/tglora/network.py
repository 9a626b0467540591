"""Branched multi-task network over a frozen residual MLP backbone.

The backbone is a frozen stem followed by ``stages`` residual blocks
``h + fc2(gelu(fc1(h)))``; both linears of every block are TGLoRA layers
carrying that stage's task groups. Each group of stage ``s`` reads the
stream of its parent group in stage ``s - 1``; each task head reads the
final-stage stream of its group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .layer import TGLoRALayer, allocate_ranks
from .seeding import make_rng
from .tasks import TaskSpec
from .tree import TaskTree, validate_tree


class TreeError(ValueError):
    pass


@dataclass
class NetworkConfig:
    input_dim: int = 16
    hidden_dim: int = 32
    stages: int = 4
    head_hidden: int = 16
    rank: int = 8
    alpha: float = 4.0
    dropout: float = 0.05
    # Rank of every module in a fully task-specific last stage; None = proportional.
    last_stage_rank: int | None = None
    # "proportional": the layer's total rank is split across groups;
    # "per_group": every group module gets the full rank.
    rank_policy: str = "proportional"
    residual: bool = True


@dataclass
class BackboneWeights:
    stem_w: np.ndarray
    stem_b: np.ndarray
    blocks: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]]


def init_backbone(input_dim: int, hidden_dim: int, stages: int, seed: int) -> BackboneWeights:
    """Seeded stand-in for pre-trained backbone weights."""
    rng = make_rng(seed, "backbone")
    d = hidden_dim
    stem_w = rng.normal(0.0, 1.0 / math.sqrt(input_dim), (d, input_dim))
    stem_b = rng.normal(0.0, 0.1, d)
    blocks = []
    for _ in range(stages):
        blocks.append((rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)), rng.normal(0.0, 0.1, d),
                       rng.normal(0.0, 1.0 / math.sqrt(d), (d, d)), rng.normal(0.0, 0.1, d)))
    return BackboneWeights(stem_w, stem_b, blocks)


def _gelu_np(x: np.ndarray) -> np.ndarray:
    return ad.gelu(x).data


def backbone_features(w: BackboneWeights, x: np.ndarray, residual: bool = True,
                      deltas: Sequence[tuple[np.ndarray, np.ndarray] | None] | None = None) -> np.ndarray:
    """Plain numpy pass through the backbone; ``deltas[s]`` perturbs stage ``s``'s two weights."""
    h = x @ w.stem_w.T + w.stem_b
    for s, (w1, b1, w2, b2) in enumerate(w.blocks):
        if deltas is not None and deltas[s] is not None:
            w1, w2 = w1 + deltas[s][0], w2 + deltas[s][1]
        y = _gelu_np(h @ w1.T + b1) @ w2.T + b2
        h = h + y if residual else y
    return h


def stage_ranks(tree: TaskTree, config: NetworkConfig) -> list[list[int]]:
    out = []
    last = tree.stage_count - 1
    for s, part in enumerate(tree.stages):
        sizes = [len(g) for g in part]
        if config.rank_policy == "per_group":
            out.append([config.rank] * len(part))
            continue
        if config.rank_policy != "proportional":
            raise ValueError(f"unknown rank policy {config.rank_policy!r}")
        fixed = config.last_stage_rank if s == last and all(n == 1 for n in sizes) else None
        out.append(allocate_ranks(config.rank, sizes, fixed_rank=fixed))
    return out


class Head:
    def __init__(self, store: ParamStore, prefix: str, d: int, hidden: int, out: int, rng: np.random.Generator):
        self.params = []
        dims = [d, hidden, out] if hidden else [d, out]
        for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
            w = store.add(f"{prefix}.fc{i + 1}.weight", Tensor(rng.normal(0.0, 1.0 / math.sqrt(a), (b, a))))
            bias = store.add(f"{prefix}.fc{i + 1}.bias", Tensor(np.zeros(b)))
            self.params.append((w, bias))

    def __call__(self, h: Tensor) -> Tensor:
        for i, (w, b) in enumerate(self.params):
            if i:
                h = ad.gelu(h)
            h = ad.add(ad.matmul(h, ad.transpose(w)), b)
        return h


class BranchedNetwork:
    def __init__(self, config: NetworkConfig, tasks: Sequence[TaskSpec], tree: TaskTree, store: ParamStore,
                 stem: tuple[Tensor, Tensor], layers: list[tuple[TGLoRALayer, TGLoRALayer]], heads: list[Head]):
        self.config = config
        self.tasks = list(tasks)
        self.tree = tree
        self.store = store
        self.stem = stem
        self.layers = layers
        self.heads = heads
        self._parents = [[0] * len(tree.stages[0])] + [
            [tree.parent(s, g) for g in range(len(tree.stages[s]))] for s in range(1, tree.stage_count)]
        self._final_group = [tree.group_of(tree.stage_count - 1, t) for t in range(len(self.tasks))]

    # ------------------------------------------------------------------
    def adapter_layers(self) -> list[TGLoRALayer]:
        return [l for pair in self.layers for l in pair]

    def backbone_names(self) -> list[str]:
        return [n for n, _ in self.store.frozen()]

    def head_names(self) -> list[str]:
        return [n for n, _ in self.store if n.startswith("head.")]

    def adapter_names(self) -> list[str]:
        return [n for n, _ in self.store if ".lora." in n]

    def forward_streams(self, x, training: bool = False, rng: np.random.Generator | None = None) -> list[list[Tensor]]:
        """Per-stage output streams, one per task group."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        w, b = self.stem
        h = ad.add(ad.matmul(x, ad.transpose(w)), b)
        prev = [h]
        out = []
        for s, (fc1, fc2) in enumerate(self.layers):
            parents = self._parents[s]
            fanout = np.bincount(parents, minlength=len(prev))
            inputs = [ad.copy(prev[p]) if fanout[p] > 1 else prev[p] for p in parents]
            z = [ad.gelu(t) for t in fc1.forward(inputs, training, rng)]
            y = fc2.forward(z, training, rng)
            streams = [ad.add(i, yi) for i, yi in zip(inputs, y)] if self.config.residual else y
            out.append(streams)
            prev = streams
        return out

    def head_inputs(self, x, training: bool = False, rng=None) -> list[Tensor]:
        final = self.forward_streams(x, training, rng)[-1]
        return [final[g] for g in self._final_group]

    def forward(self, x, training: bool = False, rng=None) -> list[Tensor]:
        """Per-task predictions, in task order."""
        feats = self.head_inputs(x, training, rng)
        return [head(f) for head, f in zip(self.heads, feats)]

    __call__ = forward


def build_network(config: NetworkConfig, tasks: Sequence[TaskSpec], tree: TaskTree, seed: int,
                  backbone: BackboneWeights | None = None, backbone_seed: int = 0) -> BranchedNetwork:
    """Frozen backbone, TGLoRA adapters per the tree, and trainable task heads.

    Adapter and head streams are keyed by task names, so a task's modules
    get identical initial values in any network where it has the same group.
    """
    tasks = list(tasks)
    violations = validate_tree(tree, len(tasks))
    if violations:
        raise TreeError("invalid task tree: " + "; ".join(violations))
    if tree.stage_count != config.stages:
        raise TreeError(f"tree has {tree.stage_count} stages, network has {config.stages}")
    if backbone is None:
        backbone = init_backbone(config.input_dim, config.hidden_dim, config.stages, backbone_seed)
    d = config.hidden_dim
    store = ParamStore()
    stem = (store.add("stem.weight", Tensor(backbone.stem_w), frozen=True),
            store.add("stem.bias", Tensor(backbone.stem_b), frozen=True))
    ranks = stage_ranks(tree, config)
    layers = []
    for s, part in enumerate(tree.stages):
        keys = ["+".join(tasks[t].name for t in g) for g in part]
        w1, b1, w2, b2 = backbone.blocks[s]
        pair = []
        for j, (w, b) in enumerate(((w1, b1), (w2, b2)), start=1):
            name = f"stage{s}.fc{j}"
            layer = TGLoRALayer.init(d, d, ranks[s], config.alpha, seed=seed, weight=w, bias=b,
                                     dropout=config.dropout, name=name, group_keys=keys)
            layer.weight = store.add(f"{name}.weight", layer.weight, frozen=True)
            layer.bias = store.add(f"{name}.bias", layer.bias, frozen=True)
            for key, m in zip(keys, layer.modules):
                store.add(f"{name}.lora.{key}.A", m.A)
                store.add(f"{name}.lora.{key}.B", m.B)
            pair.append(layer)
        layers.append(tuple(pair))
    heads = [Head(store, f"head.{t.name}", d, config.head_hidden, t.out_dim, make_rng(seed, "head", t.name))
             for t in tasks]
    return BranchedNetwork(config, tasks, tree, store, stem, layers, heads)
