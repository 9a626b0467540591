"""Synthetic multi-task data with known task clusters.

The frozen backbone of the network is the generator's "pre-trained" model.
The teacher that produced the targets differs from it by a low-rank weight
shift shared by all tasks in the first stage and a cluster-specific
low-rank shift in the stages listed in ``cluster_stages``. Task ``t`` in
cluster ``c`` then reads

    y_t = head_c(teacher_c(x)) + epsilon * delta_t(teacher_c(x)) + noise * n

where ``head_c`` and ``delta_t`` are random maps scaled to unit output
variance. Classification tasks take the argmax of ``y_t``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .network import BackboneWeights, backbone_features, init_backbone
from .seeding import make_rng
from .tasks import TaskSpec


@dataclass
class TaskGenerator:
    input_dim: int = 16
    hidden_dim: int = 32
    stages: int = 4
    task_count: int = 4
    clusters: list[int] | None = None
    epsilon: float = 0.1
    noise: float = 0.05
    out_dim: int = 4
    teacher_seed: int = 0
    shared_shift: float = 1.0
    shared_rank: int = 4
    cluster_shift: float = 2.0
    cluster_rank: int = 3
    cluster_stages: list[int] = field(default_factory=lambda: [1])
    # "opposed": clusters shift one common subspace with alternating signs;
    # "independent": each cluster draws its own shift.
    cluster_mode: str = "opposed"
    classification: list[int] = field(default_factory=list)
    teacher_head_hidden: int = 0
    residual: bool = True

    def __post_init__(self):
        if self.clusters is None:
            half = (self.task_count + 1) // 2
            self.clusters = [0] * half + [1] * (self.task_count - half)
        if len(self.clusters) != self.task_count:
            raise ValueError("one cluster label per task required")
        if self.epsilon < 0 or self.noise < 0:
            raise ValueError("epsilon and noise must be non-negative")

    @property
    def cluster_partition(self) -> tuple[tuple[int, ...], ...]:
        groups: dict[int, list[int]] = {}
        for t, c in enumerate(self.clusters):
            groups.setdefault(c, []).append(t)
        return tuple(sorted(tuple(g) for g in groups.values()))

    def task_specs(self) -> list[TaskSpec]:
        return [TaskSpec(f"t{t}", "cross_entropy" if t in self.classification else "mse", 1.0, self.out_dim)
                for t in range(self.task_count)]

    def backbone(self) -> BackboneWeights:
        return init_backbone(self.input_dim, self.hidden_dim, self.stages, self.teacher_seed)


def _low_rank(rng: np.random.Generator, d: int, rank: int, scale: float) -> np.ndarray:
    u = rng.normal(0.0, 1.0 / math.sqrt(d), (d, rank))
    v = rng.normal(0.0, 1.0 / math.sqrt(d), (d, rank))
    return scale * (u @ v.T) / math.sqrt(rank)


class _Teacher:
    def __init__(self, gen: TaskGenerator):
        self.gen = gen
        self.backbone = gen.backbone()
        d = gen.hidden_dim
        rng = make_rng(gen.teacher_seed, "teacher")
        shared = [(_low_rank(rng, d, gen.shared_rank, gen.shared_shift),
                   _low_rank(rng, d, gen.shared_rank, gen.shared_shift))]
        self.deltas: dict[int, list] = {}
        common = {}
        for s in gen.cluster_stages:
            crng = make_rng(gen.teacher_seed, "cluster-common", s)
            common[s] = (_low_rank(crng, d, gen.cluster_rank, gen.cluster_shift),
                         _low_rank(crng, d, gen.cluster_rank, gen.cluster_shift))
        for i, c in enumerate(sorted(set(gen.clusters))):
            crng = make_rng(gen.teacher_seed, "cluster", c)
            per_stage: list = [None] * gen.stages
            per_stage[0] = shared[0]
            for s in gen.cluster_stages:
                if gen.cluster_mode == "opposed" and i < 2:
                    sign = 1.0 if i == 0 else -1.0
                    per_stage[s] = (sign * common[s][0], sign * common[s][1])
                else:
                    per_stage[s] = (_low_rank(crng, d, gen.cluster_rank, gen.cluster_shift),
                                    _low_rank(crng, d, gen.cluster_rank, gen.cluster_shift))
            self.deltas[c] = per_stage
        probe = make_rng(gen.teacher_seed, "probe").normal(size=(2048, gen.input_dim))
        self.heads = {}
        for c in self.deltas:
            self.heads[c] = self._map(make_rng(gen.teacher_seed, "head", c), self.features(probe, c),
                                    hidden=gen.teacher_head_hidden)
        self.perturb = {}
        for t, c in enumerate(gen.clusters):
            self.perturb[t] = self._map(make_rng(gen.teacher_seed, "perturb", t), self.features(probe, c), hidden=0)

    def _map(self, rng, probe_feats, hidden):
        d, out = probe_feats.shape[1], self.gen.out_dim
        if hidden:
            w1 = rng.normal(0.0, 1.0 / math.sqrt(d), (hidden, d))
            w2 = rng.normal(0.0, 1.0 / math.sqrt(hidden), (out, hidden))
            f = lambda h: np.tanh(h @ w1.T) @ w2.T
        else:
            w = rng.normal(0.0, 1.0 / math.sqrt(d), (out, d))
            f = lambda h: h @ w.T
        y = f(probe_feats)
        mu, sd = y.mean(axis=0), y.std(axis=0) + 1e-12
        return lambda h: (f(h) - mu) / sd

    def features(self, x: np.ndarray, cluster: int) -> np.ndarray:
        return backbone_features(self.backbone, x, self.gen.residual, self.deltas[cluster])

    def targets(self, x: np.ndarray) -> list[np.ndarray]:
        feats = {c: self.features(x, c) for c in self.deltas}
        out = []
        for t, c in enumerate(self.gen.clusters):
            out.append(self.heads[c](feats[c]) + self.gen.epsilon * self.perturb[t](feats[c]))
        return out


@dataclass
class Dataset:
    generator: TaskGenerator
    seed: int
    x_train: np.ndarray
    y_train: list[np.ndarray]
    x_val: np.ndarray
    y_val: list[np.ndarray]

    @property
    def tasks(self) -> list[TaskSpec]:
        return self.generator.task_specs()

    @property
    def n_train(self) -> int:
        return self.x_train.shape[0]

    def subset(self, n: int) -> Dataset:
        """First ``n`` training examples; validation split unchanged."""
        return Dataset(self.generator, self.seed, self.x_train[:n], [y[:n] for y in self.y_train],
                       self.x_val, self.y_val)

    def manifest(self) -> dict:
        return {
            "generator": asdict(self.generator),
            "seed": self.seed,
            "n_train": int(self.x_train.shape[0]),
            "n_val": int(self.x_val.shape[0]),
            "cluster_truth": [list(g) for g in self.generator.cluster_partition],
        }

    def save(self, directory: str | Path, provenance: dict | None = None) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        arrays = [("x_train", self.x_train), ("x_val", self.x_val)]
        arrays += [(f"y_train.{t}", y) for t, y in enumerate(self.y_train)]
        arrays += [(f"y_val.{t}", y) for t, y in enumerate(self.y_val)]
        offset, chunks, index = 0, [], []
        for name, a in arrays:
            a = np.ascontiguousarray(a, dtype="<f8")
            index.append({"name": name, "shape": list(a.shape), "offset": offset})
            chunks.append(a.tobytes())
            offset += a.size
        (directory / "dataset.bin").write_bytes(b"".join(chunks))
        manifest = self.manifest() | {"dtype": "float64-le", "arrays": index}
        if provenance:
            manifest["provenance"] = provenance
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> Dataset:
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        blob = np.frombuffer((directory / "dataset.bin").read_bytes(), dtype="<f8")
        arrays = {}
        for item in manifest["arrays"]:
            n = int(np.prod(item["shape"]))
            arrays[item["name"]] = blob[item["offset"]:item["offset"] + n].reshape(item["shape"]).copy()
        gen = TaskGenerator(**manifest["generator"])
        T = gen.task_count
        return cls(gen, manifest["seed"], arrays["x_train"], [arrays[f"y_train.{t}"] for t in range(T)],
                   arrays["x_val"], [arrays[f"y_val.{t}"] for t in range(T)])


def generate(gen: TaskGenerator, n_train: int, n_val: int, seed: int) -> Dataset:
    if n_train < 1 or n_val < 1:
        raise ValueError("dataset sizes must be >= 1")
    teacher = _Teacher(gen)
    splits = []
    for split, n in (("train", n_train), ("val", n_val)):
        x = make_rng(seed, "x", split).normal(size=(n, gen.input_dim))
        ys = []
        for t, y in enumerate(teacher.targets(x)):
            y = y + gen.noise * make_rng(seed, "noise", split, t).normal(size=y.shape)
            if t in gen.classification:
                y = np.argmax(y, axis=1).astype(np.float64)
            ys.append(y)
        splits.append((x, ys))
    (xt, yt), (xv, yv) = splits
    return Dataset(gen, seed, xt, yt, xv, yv)
