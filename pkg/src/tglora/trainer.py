"""Multi-task training under the weighted joint loss, evaluation and delta-m."""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamW, AdamWConfig, Tensor
from .network import BranchedNetwork, NetworkConfig, build_network
from .layer import allocate_ranks
from .seeding import make_rng
from .synthetic import Dataset
from .tasks import TaskSpec
from .tree import TaskTree

MODES = ("reference", "individual", "shared", "progressive")


class DivergenceError(RuntimeError):
    pass


class BudgetError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    warmup_epochs: int = 10
    cosine: bool = False


@dataclass
class RunRecord:
    mode: str
    seed: int
    config: dict
    task_names: list[str]
    metric_kinds: list[str]
    lower_is_better: list[int]
    epoch_losses: list[list[float]]
    metrics: list[float]
    trainable_params: int
    delta_m: float | None = None
    wall_time: float = 0.0

    def metrics_json(self) -> dict:
        return {
            "seed": self.seed,
            "mode": self.mode,
            "per_task": [{"task": t, "metric": k, "value": v}
                         for t, k, v in zip(self.task_names, self.metric_kinds, self.metrics)],
            "delta_m_percent": self.delta_m,
            "trainable_params": self.trainable_params,
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> RunRecord:
        return cls(**d)

    def comparable(self) -> dict:
        d = self.to_dict()
        d.pop("wall_time")
        return d


# ----------------------------------------------------------------------------
# losses and metrics
# ----------------------------------------------------------------------------

def task_loss(pred: Tensor, target: np.ndarray, spec: TaskSpec) -> Tensor:
    if spec.loss == "mse":
        return ad.mse_loss(pred, target)
    return ad.cross_entropy(pred, target.astype(np.int64))


def mtl_loss(losses: Sequence[Tensor], weights: Sequence[float]) -> Tensor:
    """Weighted sum of per-task losses."""
    if len(losses) != len(weights):
        raise ValueError(f"{len(losses)} losses for {len(weights)} weights")
    total = None
    for l, w in zip(losses, weights):
        term = ad.mul(float(w), l)
        total = term if total is None else ad.add(total, term)
    return total


def task_metric(pred: np.ndarray, target: np.ndarray, spec: TaskSpec) -> float:
    if spec.metric == "rmse":
        return float(np.sqrt(np.mean((pred - target) ** 2)))
    return float(np.mean(np.argmax(pred, axis=1) == target.astype(np.int64)))


def evaluate(net: BranchedNetwork, x: np.ndarray, ys: Sequence[np.ndarray]) -> list[float]:
    preds = net.forward(x)
    return [task_metric(p.data, y, spec) for p, y, spec in zip(preds, ys, net.tasks)]


def delta_m(multi: Sequence[float], single: Sequence[float], lower_is_better: Sequence[int]) -> float:
    """Mean signed relative change against single-task metrics, in percent."""
    if not len(multi) == len(single) == len(lower_is_better):
        raise ValueError("metric lists differ in length")
    if any(s == 0 for s in single):
        raise ZeroDivisionError("single-task metric of 0")
    total = 0.0
    for m, s, l in zip(multi, single, lower_is_better):
        total += (-1) ** l * (m - s) / s
    return 100.0 * total / len(multi)


def backbone_hash(net: BranchedNetwork) -> str:
    h = hashlib.sha256()
    for name, t in net.store.frozen():
        h.update(name.encode())
        h.update(t.data.tobytes())
    return h.hexdigest()


def lr_at(step: int, steps_per_epoch: int, cfg: TrainConfig) -> float:
    if not cfg.cosine:
        return cfg.lr
    warm = cfg.warmup_epochs * steps_per_epoch
    total = max(1, cfg.epochs * steps_per_epoch)
    if step < warm:
        return cfg.lr * (step + 1) / warm
    frac = (step - warm) / max(1, total - warm)
    return 0.5 * cfg.lr * (1.0 + math.cos(math.pi * frac))


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------

def train(net: BranchedNetwork, data: Dataset, cfg: TrainConfig, seed: int, mode: str = "progressive",
          task_index: Sequence[int] | None = None) -> RunRecord:
    """Train adapters and heads of ``net``; ``task_index`` maps net tasks to dataset tasks."""
    started = time.perf_counter()
    idx = list(range(len(net.tasks))) if task_index is None else list(task_index)
    y_train = [data.y_train[i] for i in idx]
    y_val = [data.y_val[i] for i in idx]
    weights = [t.weight for t in net.tasks]
    net.store.reset_requires_grad()
    opt = AdamW(net.store, AdamWConfig(cfg.lr, tuple(cfg.betas), cfg.eps, cfg.weight_decay))
    shuffle = make_rng(seed, "shuffle")
    drop = make_rng(seed, "dropout")
    n = data.n_train
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        perm = shuffle.permutation(n)
        sums = np.zeros(len(idx))
        for start in range(0, n, cfg.batch_size):
            b = perm[start:start + cfg.batch_size]
            preds = net.forward(data.x_train[b], training=True, rng=drop)
            losses = [task_loss(p, y[b], spec) for p, y, spec in zip(preds, y_train, net.tasks)]
            loss = mtl_loss(losses, weights)
            if not np.isfinite(loss.data):
                raise DivergenceError(f"non-finite loss in epoch {epoch}")
            sums += [float(l.data) * len(b) for l in losses]
            net.store.zero_grad()
            ad.backward(loss)
            opt.lr = lr_at(step, steps_per_epoch, cfg)
            opt.step()
            step += 1
        history.append([float(s / n) for s in sums])
    net.store.zero_grad()
    metrics = evaluate(net, data.x_val, y_val)
    return RunRecord(
        mode=mode, seed=seed, config={"train": asdict(cfg), "model": asdict(net.config),
                                      "tree": [[list(g) for g in s] for s in net.tree.stages]},
        task_names=[t.name for t in net.tasks], metric_kinds=[t.metric for t in net.tasks],
        lower_is_better=[t.lower_is_better for t in net.tasks], epoch_losses=history, metrics=metrics,
        trainable_params=net.store.num_params(trainable_only=True),
        wall_time=time.perf_counter() - started)


def mode_networks(mode: str, tasks: Sequence[TaskSpec], config: NetworkConfig, seed: int,
                  tree: TaskTree | None = None, backbone_seed: int = 0) -> list[tuple[BranchedNetwork, list[int]]]:
    """Networks making up one configuration, each with the dataset task indices it serves.

    ``reference`` is one single-task network per task with the full per-layer
    rank (the single-task baseline for delta-m); ``individual`` is the same
    with the rank budget split across tasks; ``shared`` uses one group
    everywhere; ``progressive`` uses ``tree``.
    """
    T = len(tasks)
    if mode in ("reference", "individual"):
        ranks = [config.rank] * T if mode == "reference" else allocate_ranks(config.rank, [1] * T)
        out = []
        for t, (spec, r) in enumerate(zip(tasks, ranks)):
            cfg = NetworkConfig(**{**asdict(config), "rank": int(r)})
            net = build_network(cfg, [spec], TaskTree.shared(config.stages, 1), seed, backbone_seed=backbone_seed)
            out.append((net, [t]))
        return out
    if mode == "shared":
        tree = TaskTree.shared(config.stages, T)
    elif tree is None:
        raise ValueError(f"mode {mode!r} needs a task tree")
    return [(build_network(config, tasks, tree, seed, backbone_seed=backbone_seed), list(range(T)))]


def _merge_records(records: Sequence[RunRecord], mode: str, seed: int, config: dict) -> RunRecord:
    epochs = len(records[0].epoch_losses)
    return RunRecord(
        mode=mode, seed=seed, config=config,
        task_names=[r.task_names[0] for r in records], metric_kinds=[r.metric_kinds[0] for r in records],
        lower_is_better=[r.lower_is_better[0] for r in records],
        epoch_losses=[[r.epoch_losses[e][0] for r in records] for e in range(epochs)],
        metrics=[r.metrics[0] for r in records],
        trainable_params=sum(r.trainable_params for r in records),
        wall_time=sum(r.wall_time for r in records))


def train_mode(mode: str, data: Dataset, config: NetworkConfig, cfg: TrainConfig, seed: int,
               tree: TaskTree | None = None, backbone_seed: int | None = None,
               label: str | None = None) -> tuple[RunRecord, list[BranchedNetwork]]:
    """Build and train every network of one configuration."""
    bseed = data.generator.teacher_seed if backbone_seed is None else backbone_seed
    label = label or mode
    nets = mode_networks(mode, data.tasks, config, seed, tree, bseed)
    if len(nets) == 1 and mode not in ("reference", "individual"):
        net, idx = nets[0]
        return train(net, data, cfg, seed, label, task_index=idx), [net]
    records = [train(net, data, cfg, seed, label, task_index=idx) for net, idx in nets]
    extra = {"train": asdict(cfg), "model": asdict(config), "ranks": [n.config.rank for n, _ in nets]}
    return _merge_records(records, label, seed, extra), [n for n, _ in nets]


def run_baselines(data: Dataset, config: NetworkConfig, cfg: TrainConfig, tree: TaskTree, seed: int,
                  modes: Sequence[str] = MODES) -> dict[str, RunRecord]:
    """Train the comparable configurations and fill in delta-m against ``reference``."""
    from .cost import rank_unit_params

    records = {m: train_mode(m, data, config, cfg, seed, tree)[0] for m in modes}
    budgeted = [records[m] for m in ("individual", "shared", "progressive") if m in records]
    if budgeted:
        unit = rank_unit_params(config)
        lo = min(r.trainable_params for r in budgeted)
        hi = max(r.trainable_params for r in budgeted)
        if hi - lo > unit:
            raise BudgetError(f"trainable parameter budgets differ by {hi - lo} > one rank unit ({unit})")
    if "reference" in records:
        ref = records["reference"]
        for r in records.values():
            r.delta_m = delta_m(r.metrics, ref.metrics, r.lower_is_better)
    return records
