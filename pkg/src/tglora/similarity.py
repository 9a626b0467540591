"""Gradient-based task similarity.

Heads are tuned on a frozen backbone, then for each example ``i`` and task
``t`` the gradient of task ``t``'s loss on example ``i`` with respect to the
backbone parameters is taken. Task pairs are compared example by example
with the cosine of the jointly normalised gradients and averaged.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, AdamWConfig, flatten_gradients
from .network import BranchedNetwork
from .seeding import make_rng
from .synthetic import Dataset
from .trainer import DivergenceError, mtl_loss, task_loss

ZERO_NORM = 1e-12


@dataclass
class SimilarityMatrix:
    values: np.ndarray
    task_names: list[str]
    n_examples: int

    def __post_init__(self):
        v = self.values
        assert v.shape == (len(self.task_names),) * 2
        assert np.allclose(v, v.T, rtol=0, atol=1e-12)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.task_names)
        for row in self.values:
            w.writerow([f"{v:.6f}" for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, n_examples: int = 0) -> SimilarityMatrix:
        rows = list(csv.reader(io.StringIO(text)))
        return cls(np.array([[float(v) for v in r] for r in rows[1:]]), rows[0], n_examples)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv())

    @classmethod
    def load(cls, path: str | Path) -> SimilarityMatrix:
        return cls.from_csv(Path(path).read_text())


def tune_heads(net: BranchedNetwork, data: Dataset, steps: int = 200, lr: float = 1e-3, seed: int = 0,
               subset: int = 256, batch_size: int | None = None) -> list[float]:
    """Fit the task heads on a frozen backbone (adapters untouched, no dropout).

    Returns the joint loss before each step and after the last one.
    """
    n = min(subset, data.n_train)
    x = data.x_train[:n]
    ys = [y[:n] for y in data.y_train]
    heads = set(net.head_names())
    for name, t in net.store:
        t.requires_grad = name in heads
    opt = AdamW(net.store, AdamWConfig(lr=lr, weight_decay=0.0))
    rng = make_rng(seed, "tune-heads")
    weights = [t.weight for t in net.tasks]
    trace = []

    def joint(b):
        preds = net.forward(x[b])
        return mtl_loss([task_loss(p, y[b], s) for p, y, s in zip(preds, ys, net.tasks)], weights)

    for _ in range(steps):
        b = slice(None) if batch_size is None else rng.choice(n, size=min(batch_size, n), replace=False)
        loss = joint(b)
        if not np.isfinite(loss.data):
            raise DivergenceError("non-finite loss while tuning heads")
        trace.append(float(loss.data))
        net.store.zero_grad()
        ad.backward(loss)
        for name, t in net.store:
            if name not in heads:
                t.grad = None
        opt.step()
    trace.append(float(joint(slice(None)).data))
    net.store.zero_grad()
    net.store.reset_requires_grad()
    return trace


def example_gradient(net: BranchedNetwork, x: np.ndarray, target: np.ndarray, task: int,
                     scale: float = 1.0) -> np.ndarray:
    """Gradient of one task's loss on one example w.r.t. the frozen backbone, flattened."""
    shared = net.backbone_names()
    for name, t in net.store:
        t.requires_grad = False
    net.store.set_requires_grad(shared, True)
    net.store.zero_grad()
    try:
        feats = net.head_inputs(np.asarray(x)[None, :])
        pred = net.heads[task](feats[task])
        loss = task_loss(pred, np.asarray(target)[None, ...], net.tasks[task])
        if scale != 1.0:
            loss = ad.mul(scale, loss)
        ad.backward(loss)
        g = flatten_gradients(net.store, shared)
    finally:
        net.store.zero_grad()
        net.store.reset_requires_grad()
    return g


def pair_similarity(g: np.ndarray, h: np.ndarray) -> float:
    """Cosine of ``g`` and ``h`` after dividing both by ``|g| + |h|``; 0 if either vanishes."""
    g, h = np.asarray(g, dtype=np.float64), np.asarray(h, dtype=np.float64)
    if g.shape != h.shape:
        raise ValueError(f"gradient lengths differ: {g.shape} vs {h.shape}")
    ng, nh = np.linalg.norm(g), np.linalg.norm(h)
    if ng < ZERO_NORM or nh < ZERO_NORM:
        return 0.0
    c = ng + nh
    a, b = g / c, h / c
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b)))


def example_gradients(net: BranchedNetwork, data: Dataset, indices: Sequence[int],
                      loss_scales: Sequence[float] | None = None) -> np.ndarray:
    """Array (tasks, examples, shared params) of per-example gradients."""
    T = len(net.tasks)
    scales = [1.0] * T if loss_scales is None else list(loss_scales)
    out = []
    for t in range(T):
        out.append(np.stack([example_gradient(net, data.x_train[i], data.y_train[t][i], t, scales[t])
                             for i in indices]))
    return np.stack(out)


def matrix_from_gradients(grads: np.ndarray) -> np.ndarray:
    T, N = grads.shape[:2]
    sim = np.eye(T)
    for t in range(T):
        for u in range(t + 1, T):
            acc = 0.0
            for i in range(N):
                acc += pair_similarity(grads[t, i], grads[u, i])
            sim[t, u] = sim[u, t] = acc / N
    return sim


def similarity_matrix(net: BranchedNetwork, data: Dataset, n_examples: int = 128, seed: int | None = None,
                      loss_scales: Sequence[float] | None = None) -> SimilarityMatrix:
    """Empirical mean of per-example pair similarities over ``n_examples`` shared inputs.

    Examples are the first ``n_examples`` training inputs, or a seeded
    sample of them when ``seed`` is given.
    """
    if n_examples < 1:
        raise ValueError("need at least one example")
    if n_examples > data.n_train:
        raise ValueError(f"{n_examples} examples requested, dataset has {data.n_train}")
    if seed is None:
        idx = list(range(n_examples))
    else:
        idx = sorted(make_rng(seed, "similarity").choice(data.n_train, n_examples, replace=False).tolist())
    grads = example_gradients(net, data, idx, loss_scales)
    return SimilarityMatrix(matrix_from_gradients(grads), [t.name for t in net.tasks], n_examples)
