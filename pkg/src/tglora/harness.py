"""Pipeline steps over a run directory.

Layout of one run (``<root>/<experiment>/<seed>``)::

    config.json          resolved config, canonical JSON
    data/                dataset.bin + manifest.json
    heads/               tuned similarity heads
    similarity.csv       (+ similarity.meta.json)
    groups.json
    cost.json
    <mode>/              metrics.json, record.json, params/, adapters/

Every step reads only its declared inputs and raises ``MissingArtifact``
when one is absent.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from filelock import FileLock

from .autodiff import ParamStore
from .config import ExperimentConfig
from .cost import cost_report, format_table, schedule_cost_scan, write_cost_json
from .grouping import GroupingResult, compute_grouping, partition_score
from .layer import save_adapters
from .network import BranchedNetwork, build_network
from .similarity import SimilarityMatrix, similarity_matrix, tune_heads
from .synthetic import Dataset, TaskGenerator, generate
from .trainer import RunRecord, delta_m, evaluate, mode_networks, train_mode
from .tree import TaskTree, schedule_groups, validate_tree

RUN_ROOT_ENV = "TGLORA_RUN_ROOT"
SWAP_MODE = "ablate-swap"


class MissingArtifact(FileNotFoundError):
    pass


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


@dataclass
class Run:
    cfg: ExperimentConfig
    seed: int
    dir: Path

    @classmethod
    def resolve(cls, cfg: ExperimentConfig, seed: int | None = None, run_dir: str | Path | None = None) -> Run:
        seed = cfg.seeds[0] if seed is None else seed
        path = Path(run_dir) if run_dir is not None else run_root() / cfg.experiment / str(seed)
        return cls(cfg, seed, path)

    @property
    def provenance(self) -> dict:
        return {"config_hash": self.cfg.hash(), "seed": self.seed}

    @property
    def teacher_seed(self) -> int:
        t = self.cfg.data.teacher_seed
        return self.seed if t is None else t

    def path(self, *parts: str) -> Path:
        return self.dir.joinpath(*parts)

    def require(self, *parts: str) -> Path:
        p = self.path(*parts)
        if not p.exists():
            raise MissingArtifact(str(p))
        return p

    def lock(self) -> FileLock:
        self.dir.mkdir(parents=True, exist_ok=True)
        return FileLock(str(self.path(".lock")))

    def write_config(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        self.path("config.json").write_text(_dump(self.cfg.to_dict() | {"provenance": self.provenance}))

    def generator(self) -> TaskGenerator:
        d, m = self.cfg.data, self.cfg.model
        return TaskGenerator(
            input_dim=m.input_dim, hidden_dim=m.hidden_dim, stages=m.stages, task_count=d.task_count,
            clusters=d.clusters, epsilon=d.epsilon, noise=d.noise, out_dim=d.out_dim,
            teacher_seed=self.teacher_seed, shared_shift=d.shared_shift, shared_rank=d.shared_rank,
            cluster_shift=d.cluster_shift, cluster_rank=d.cluster_rank, cluster_stages=list(d.cluster_stages),
            cluster_mode=d.cluster_mode, classification=list(d.classification),
            teacher_head_hidden=d.teacher_head_hidden, residual=m.residual)


# ----------------------------------------------------------------------------
# parameter persistence
# ----------------------------------------------------------------------------

def save_params(stores: Sequence[ParamStore], directory: Path, trainable_only: bool = True,
                names: Sequence[str] | None = None, provenance: dict | None = None) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    chunks, index, offset = [], [], 0
    for i, store in enumerate(stores):
        for name, t in store:
            if trainable_only and store.is_frozen(name):
                continue
            if names is not None and name not in names:
                continue
            index.append({"net": i, "name": name, "shape": list(t.shape), "offset": offset})
            chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
            offset += t.size
    (directory / "params.bin").write_bytes(b"".join(chunks))
    (directory / "manifest.json").write_text(_dump({"dtype": "float64-le", "params": index,
                                                     "provenance": provenance or {}}))


def load_params(stores: Sequence[ParamStore], directory: Path) -> dict:
    manifest = json.loads((directory / "manifest.json").read_text())
    blob = np.frombuffer((directory / "params.bin").read_bytes(), dtype="<f8")
    for item in manifest["params"]:
        n = int(np.prod(item["shape"]))
        stores[item["net"]][item["name"]].data[...] = blob[item["offset"]:item["offset"] + n].reshape(item["shape"])
    return manifest


# ----------------------------------------------------------------------------
# steps
# ----------------------------------------------------------------------------

def gen_data(run: Run) -> Dataset:
    data = generate(run.generator(), run.cfg.data.n_train, run.cfg.data.n_val, run.seed)
    data.save(run.path("data"), provenance=run.provenance)
    run.write_config()
    return data


def load_data(run: Run) -> Dataset:
    run.require("data", "manifest.json")
    return Dataset.load(run.path("data"))


def similarity_network(run: Run, data: Dataset) -> BranchedNetwork:
    return build_network(run.cfg.model, data.tasks, TaskTree.shared(run.cfg.model.stages, len(data.tasks)),
                         run.seed, backbone_seed=run.teacher_seed)


def tune_heads_step(run: Run, data: Dataset | None = None) -> list[float]:
    data = data or load_data(run)
    sc = run.cfg.similarity
    net = similarity_network(run, data)
    trace = tune_heads(net, data, sc.tune_steps, sc.tune_lr, run.seed, sc.tune_subset)
    save_params([net.store], run.path("heads"), names=net.head_names(),
                provenance=run.provenance | {"loss_trace": trace})
    return trace


def similarity_step(run: Run, data: Dataset | None = None) -> SimilarityMatrix:
    data = data or load_data(run)
    run.require("heads", "manifest.json")
    net = similarity_network(run, data)
    load_params([net.store], run.path("heads"))
    sim = similarity_matrix(net, data, min(run.cfg.similarity.n_examples, data.n_train))
    sim.save(run.path("similarity.csv"))
    run.path("similarity.meta.json").write_text(_dump(run.provenance | {"n_examples": sim.n_examples}))
    return sim


def group_step(run: Run) -> GroupingResult:
    gc = run.cfg.grouping
    T, S = run.cfg.data.task_count, run.cfg.model.stages
    if gc.stages is not None:
        tree = TaskTree.from_lists(gc.stages)
        problems = validate_tree(tree, T)
        if problems:
            raise ValueError("grouping.stages: " + "; ".join(problems))
        result = GroupingResult(tree, tree.counts, [0.0] * S, 0, "override")
        if run.path("similarity.csv").exists():
            sim = SimilarityMatrix.load(run.path("similarity.csv"))
            result.scores = [partition_score(sim, p).total for p in tree.stages]
    else:
        sim = SimilarityMatrix.load(run.require("similarity.csv"))
        schedule = gc.schedule if gc.schedule is not None else schedule_groups(S, T)
        result = compute_grouping(sim, schedule, gc.mode)
    result.save(run.path("groups.json"), provenance=run.provenance)
    return result


def load_tree(run: Run) -> TaskTree:
    return GroupingResult.load(run.require("groups.json")).tree


def _reference_metrics(run: Run) -> list[float] | None:
    p = run.path("reference", "metrics.json")
    if not p.exists():
        return None
    return [e["value"] for e in json.loads(p.read_text())["per_task"]]


def _write_mode(run: Run, label: str, record: RunRecord, nets: Sequence[BranchedNetwork]) -> None:
    out = run.path(label)
    out.mkdir(parents=True, exist_ok=True)
    ref = _reference_metrics(run) if label != "reference" else record.metrics
    if ref is not None:
        record.delta_m = delta_m(record.metrics, ref, record.lower_is_better)
    out.joinpath("metrics.json").write_text(_dump(record.metrics_json() | {"provenance": run.provenance}))
    # wall time is the only non-deterministic field; kept apart so reruns are byte-identical
    out.joinpath("record.json").write_text(_dump(record.comparable() | {"provenance": run.provenance}))
    out.joinpath("timing.json").write_text(_dump({"wall_time": record.wall_time}))
    save_params([n.store for n in nets], out / "params", provenance=run.provenance)
    for i, net in enumerate(nets):
        sub = out / "adapters" if len(nets) == 1 else out / "adapters" / net.tasks[0].name
        save_adapters(net.adapter_layers(), sub, extra={"provenance": run.provenance})


def train_step(run: Run, mode: str, data: Dataset | None = None, tree: TaskTree | None = None,
               label: str | None = None) -> RunRecord:
    data = data or load_data(run)
    if mode == "progressive" and tree is None:
        tree = load_tree(run)
    record, nets = train_mode(mode, data, run.cfg.model, run.cfg.training, run.seed, tree,
                              backbone_seed=run.teacher_seed, label=label)
    _write_mode(run, label or mode, record, nets)
    if label is None and mode == "reference":
        refresh_delta_m(run)
    return record


def ablate_swap_step(run: Run, swap: Sequence[int] | None = None, stages: Sequence[int] | None = None,
                     data: Dataset | None = None) -> RunRecord:
    ab = run.cfg.ablation
    swap = list(swap if swap is not None else (ab.swap or []))
    stages = list(stages if stages is not None else (ab.stages or []))
    if len(swap) != 2 or not stages:
        raise ValueError("ablate-swap needs two task ids and at least one stage")
    base = load_tree(run)
    tree = base.swap_tasks(swap[0], swap[1], stages)
    if tree == base:
        raise ValueError(f"swapping tasks {swap[0]} and {swap[1]} at stages {stages} leaves the tree unchanged")
    problems = validate_tree(tree, run.cfg.data.task_count)
    if problems:
        raise ValueError("swapped tree is invalid: " + "; ".join(problems))
    return train_step(run, "progressive", data, tree=tree, label=SWAP_MODE)


def _mode_dirs(run: Run) -> list[Path]:
    return sorted(p.parent for p in run.dir.glob("*/metrics.json"))


def refresh_delta_m(run: Run) -> None:
    ref = _reference_metrics(run)
    if ref is None:
        return
    for d in _mode_dirs(run):
        m = json.loads(d.joinpath("metrics.json").read_text())
        flags = [1 if e["metric"] == "rmse" else 0 for e in m["per_task"]]
        m["delta_m_percent"] = delta_m([e["value"] for e in m["per_task"]], ref, flags)
        d.joinpath("metrics.json").write_text(_dump(m))


def eval_step(run: Run, data: Dataset | None = None) -> dict[str, dict]:
    """Re-evaluate every trained mode from its saved parameters and refresh delta-m."""
    data = data or load_data(run)
    run.require("reference", "metrics.json")
    results = {}
    for d in _mode_dirs(run):
        rec = json.loads(d.joinpath("record.json").read_text())
        label = d.name
        mode = "progressive" if label == SWAP_MODE else label
        tree = TaskTree.from_lists(rec["config"]["tree"]) if mode == "progressive" else None
        nets = mode_networks(mode, data.tasks, run.cfg.model, run.seed, tree, run.teacher_seed)
        load_params([n.store for n, _ in nets], d / "params")
        metrics = []
        for net, idx in nets:
            metrics += evaluate(net, data.x_val, [data.y_val[i] for i in idx])
        m = json.loads(d.joinpath("metrics.json").read_text())
        for e, v in zip(m["per_task"], metrics):
            e["value"] = v
        d.joinpath("metrics.json").write_text(_dump(m))
        results[label] = m
    refresh_delta_m(run)
    return {d.name: json.loads(d.joinpath("metrics.json").read_text()) for d in _mode_dirs(run)}


def cost_step(run: Run, data: Dataset | None = None) -> str:
    tree = load_tree(run)
    tasks = run.generator().task_specs()
    reports = [cost_report(run.cfg.model, tasks, tree, m) for m in ("individual", "shared", "progressive")]
    scan = None
    if run.cfg.cost.schedules:
        sim = SimilarityMatrix.load(run.path("similarity.csv")) if run.path("similarity.csv").exists() else None
        scan = schedule_cost_scan(run.cfg.model, tasks, run.cfg.cost.schedules, sim)
    write_cost_json(run.path("cost.json"), reports, scan, provenance=run.provenance)
    return format_table(reports)


def run_all(run: Run, modes: Sequence[str] | None = None, ablate: bool = False) -> dict[str, RunRecord]:
    """Every step in dependency order for one seed."""
    with run.lock():
        data = gen_data(run)
        if run.cfg.grouping.stages is None:
            tune_heads_step(run, data)
            similarity_step(run, data)
        group_step(run)
        modes = list(modes or run.cfg.modes)
        if "reference" in modes:
            modes.remove("reference")
            modes.insert(0, "reference")
        records = {m: train_step(run, m, data) for m in modes}
        if ablate:
            records[SWAP_MODE] = ablate_swap_step(run, data=data)
        refresh_delta_m(run)
        cost_step(run)
    return records


# ----------------------------------------------------------------------------
# report
# ----------------------------------------------------------------------------

def collect_metrics(experiment_dir: Path) -> list[dict]:
    rows = []
    for p in sorted(experiment_dir.glob("*/*/metrics.json")):
        rows.append(json.loads(p.read_text()))
    return rows


def report(experiment_dir: str | Path) -> tuple[Path, Path]:
    """Per-seed rows plus per-mode means (report.csv) and a params-vs-delta-m series."""
    experiment_dir = Path(experiment_dir)
    rows = collect_metrics(experiment_dir)
    if not rows:
        raise MissingArtifact(str(experiment_dir / "*" / "*" / "metrics.json"))
    tasks = [e["task"] for e in rows[0]["per_task"]]
    header = ["seed", "mode"] + [f"{t}" for t in tasks] + ["delta_m_percent", "trainable_params"]
    by_mode: dict[str, list[dict]] = {}
    for r in rows:
        by_mode.setdefault(r["mode"], []).append(r)
    out = experiment_dir / "report.csv"
    series = experiment_dir / "params_vs_delta_m.csv"
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in sorted(rows, key=lambda r: (r["mode"], r["seed"])):
            w.writerow([r["seed"], r["mode"]] + [f"{e['value']:.6f}" for e in r["per_task"]]
                       + [_fmt(r["delta_m_percent"]), r["trainable_params"]])
        for mode in sorted(by_mode):
            rs = by_mode[mode]
            means = np.mean([[e["value"] for e in r["per_task"]] for r in rs], axis=0)
            dms = [r["delta_m_percent"] for r in rs if r["delta_m_percent"] is not None]
            w.writerow(["mean", mode] + [f"{v:.6f}" for v in means]
                       + [_fmt(float(np.mean(dms)) if dms else None), rs[0]["trainable_params"]])
    with series.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "trainable_params", "delta_m_percent", "n_seeds"])
        for mode in sorted(by_mode):
            rs = by_mode[mode]
            dms = [r["delta_m_percent"] for r in rs if r["delta_m_percent"] is not None]
            w.writerow([mode, rs[0]["trainable_params"], _fmt(float(np.mean(dms)) if dms else None), len(rs)])
    return out, series


def _fmt(v) -> str:
    return "" if v is None else f"{v:.6f}"
