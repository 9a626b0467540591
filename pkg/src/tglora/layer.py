"""Task-grouped low-rank adapter layer.

A ``TGLoRALayer`` wraps one frozen linear map ``W`` (d x k) and keeps one
low-rank pair ``(A_g, B_g)`` per task group. It takes one input stream per
group and returns one output stream per group::

    y_g = W x_g + b + (alpha_g / r_g) * B_g (A_g x_g)

With a single group this is exactly a LoRA linear layer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .seeding import make_rng


class ConfigurationError(ValueError):
    pass


class RoutingError(ValueError):
    pass


@dataclass
class LoRAModule:
    A: Tensor  # r x k
    B: Tensor  # d x r
    alpha: float

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def scale(self) -> float:
        return self.alpha / self.rank


def _linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    y = ad.matmul(x, ad.transpose(w))
    return y if b is None else ad.add(y, b)


class LoRALinear:
    """Plain single-adapter LoRA linear layer (reference implementation)."""

    def __init__(self, weight: Tensor, bias: Tensor | None, A: Tensor, B: Tensor, alpha: float):
        self.weight, self.bias, self.A, self.B, self.alpha = weight, bias, A, B, alpha

    def __call__(self, x: Tensor) -> Tensor:
        base = _linear(x, self.weight, self.bias)
        delta = ad.matmul(ad.matmul(x, ad.transpose(self.A)), ad.transpose(self.B))
        return ad.add(base, ad.mul(self.alpha / self.A.shape[0], delta))


class TGLoRALayer:
    def __init__(self, weight: Tensor, bias: Tensor | None, modules: Sequence[LoRAModule],
                 dropout: float = 0.0, name: str = "tglora"):
        self.weight = weight
        self.bias = bias
        self.modules = list(modules)
        self.dropout = dropout
        self.name = name
        d, k = weight.shape
        for i, m in enumerate(self.modules):
            _check_rank(m.rank, d, k)
            if m.A.shape != (m.rank, k) or m.B.shape != (d, m.rank):
                raise ConfigurationError(f"{name} group {i}: adapter shapes {m.A.shape}, {m.B.shape} "
                                         f"do not fit base weight {weight.shape}")
            if not (m.alpha > 0 and math.isfinite(m.scale)):
                raise ConfigurationError(f"{name} group {i}: scaling must be finite and positive")

    @property
    def out_features(self) -> int:
        return self.weight.shape[0]

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def group_count(self) -> int:
        return len(self.modules)

    @property
    def ranks(self) -> list[int]:
        return [m.rank for m in self.modules]

    @classmethod
    def init(cls, d: int, k: int, ranks: Sequence[int], alpha: float | Sequence[float] = 4.0,
             seed: int = 0, weight: np.ndarray | None = None, bias: np.ndarray | None = None,
             dropout: float = 0.0, name: str = "tglora", group_keys: Sequence | None = None) -> TGLoRALayer:
        """Seeded layer with ``A ~ N(0, 1/r)`` and ``B = 0`` for every group.

        ``group_keys`` name the random stream of each group's ``A``; by default
        the group index is used.
        """
        ranks = list(ranks)
        alphas = [float(alpha)] * len(ranks) if np.isscalar(alpha) else [float(a) for a in alpha]
        if len(alphas) != len(ranks):
            raise ConfigurationError("one alpha per group required")
        for r in ranks:
            _check_rank(r, d, k)
        if weight is None:
            weight = make_rng(seed, name, "weight").normal(0.0, 1.0 / math.sqrt(k), size=(d, k))
        w = Tensor(weight, requires_grad=False, name=f"{name}.weight")
        b = None if bias is None else Tensor(bias, requires_grad=False, name=f"{name}.bias")
        keys = list(range(len(ranks))) if group_keys is None else list(group_keys)
        modules = []
        for key, r, a in zip(keys, ranks, alphas):
            A = make_rng(seed, name, "A", key).normal(0.0, 1.0 / math.sqrt(r), size=(r, k))
            modules.append(LoRAModule(Tensor(A, requires_grad=True), Tensor(np.zeros((d, r)), requires_grad=True), a))
        return cls(w, b, modules, dropout=dropout, name=name)

    def forward(self, inputs: Sequence[Tensor], training: bool = False,
                rng: np.random.Generator | None = None) -> list[Tensor]:
        if len(inputs) != len(self.modules):
            raise RoutingError(f"{self.name}: got {len(inputs)} streams for {len(self.modules)} task groups")
        outs = []
        for x, m in zip(inputs, self.modules):
            if x.shape[-1] != self.in_features:
                raise ad.ShapeError(f"{self.name}.forward", x.shape, self.weight.shape)
            base = _linear(x, self.weight, self.bias)
            xa = ad.dropout(x, self.dropout, rng, training=training)
            delta = ad.matmul(ad.matmul(xa, ad.transpose(m.A)), ad.transpose(m.B))
            outs.append(ad.add(base, ad.mul(m.scale, delta)))
        return outs

    __call__ = forward

    def merge(self, group: int) -> np.ndarray:
        """Dense d x k weight equivalent to group ``group``'s adapted map."""
        if not 0 <= group < len(self.modules):
            raise IndexError(f"{self.name}: no task group {group}")
        m = self.modules[group]
        return self.weight.data + m.scale * (m.B.data @ m.A.data)

    def adapter_params(self) -> int:
        return sum(m.rank * (self.out_features + self.in_features) for m in self.modules)


def _check_rank(r: int, d: int, k: int) -> None:
    if not isinstance(r, (int, np.integer)) or r < 1 or r > min(d, k):
        raise ConfigurationError(f"rank {r} outside [1, min(d, k)={min(d, k)}]")


def allocate_ranks(total_rank: int, group_sizes: Sequence[int], fixed_rank: int | None = None) -> list[int]:
    """Split a layer's combined rank across task groups in proportion to size.

    Floors first, then the remainder goes one unit at a time to groups in
    descending size order (lower index first on ties). Groups left at zero
    take a unit from the currently largest allocation. ``fixed_rank`` ignores
    the budget and gives every group that rank.
    """
    sizes = list(group_sizes)
    if not sizes or any(s < 1 for s in sizes):
        raise ConfigurationError(f"group sizes must be >= 1, got {sizes}")
    if fixed_rank is not None:
        if fixed_rank < 1:
            raise ConfigurationError(f"fixed rank must be >= 1, got {fixed_rank}")
        return [int(fixed_rank)] * len(sizes)
    if total_rank < len(sizes):
        raise ConfigurationError(f"rank {total_rank} cannot cover {len(sizes)} task groups")
    total = sum(sizes)
    ranks = [total_rank * s // total for s in sizes]
    order = sorted(range(len(sizes)), key=lambda i: (-sizes[i], i))
    i = 0
    while sum(ranks) < total_rank:
        ranks[order[i % len(order)]] += 1
        i += 1
    for g in range(len(ranks)):
        if ranks[g] == 0:
            donor = max(range(len(ranks)), key=lambda j: (ranks[j], -j))
            ranks[donor] -= 1
            ranks[g] = 1
    return ranks


# ----------------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------------

def save_adapters(layers: Sequence[TGLoRALayer], directory: str | Path, extra: dict | None = None) -> None:
    """Write all adapter matrices to ``adapters.bin`` plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for layer in layers:
        groups = []
        for m in layer.modules:
            item = {"rank": m.rank, "alpha": m.alpha}
            for key, t in (("A", m.A), ("B", m.B)):
                item[key] = {"shape": list(t.shape), "offset": offset}
                chunks.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
                offset += t.size
            groups.append(item)
        entries.append({"layer": layer.name, "ranks": layer.ranks,
                        "alphas": [m.alpha for m in layer.modules], "groups": groups})
    (directory / "adapters.bin").write_bytes(b"".join(chunks))
    manifest = {"dtype": "float64-le", "layers": entries}
    if extra:
        manifest.update(extra)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_adapters(layers: Sequence[TGLoRALayer], directory: str | Path) -> None:
    """Overwrite the adapters of ``layers`` (matched by name) from disk."""
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    blob = np.frombuffer((directory / "adapters.bin").read_bytes(), dtype="<f8")
    by_name = {layer.name: layer for layer in layers}
    for entry in manifest["layers"]:
        layer = by_name[entry["layer"]]
        if entry["ranks"] != layer.ranks:
            raise ConfigurationError(f"{layer.name}: stored ranks {entry['ranks']} != {layer.ranks}")
        for m, item in zip(layer.modules, entry["groups"]):
            for key in ("A", "B"):
                spec = item[key]
                n = int(np.prod(spec["shape"]))
                getattr(m, key).data[...] = blob[spec["offset"]:spec["offset"] + n].reshape(spec["shape"])
