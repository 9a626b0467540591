"""Dense float64 tensors with eager reverse-mode differentiation.

Every op builds its output eagerly and records a closure that maps the
output gradient to the gradients of its parents. ``backward`` walks the
graph once in reverse topological order, accumulates into leaf ``.grad``
buffers and then drops the graph.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "ParamStore", "AdamW", "AdamWConfig",
    "ShapeError", "GradientError",
    "matmul", "add", "sub", "mul", "neg", "transpose", "relu", "gelu",
    "softmax", "mse_loss", "cross_entropy", "concat", "reshape", "sum_all",
    "mean_all", "dropout", "copy", "backward", "flatten_gradients",
]


class ShapeError(ValueError):
    """Operand shapes do not conform for an op."""

    def __init__(self, op: str, *shapes: tuple[int, ...]):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {', '.join(str(s) for s in shapes)}")


class GradientError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# ----------------------------------------------------------------------------
# ops
# ----------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), fn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), fn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), fn)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Matrix product for 1-D and 2-D operands (numpy semantics)."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim not in (1, 2) or b.data.ndim not in (1, 2):
        raise ShapeError("matmul", a.shape, b.shape)
    if a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def fn(g):
        ad, bd = a.data, b.data
        if ad.ndim == 2 and bd.ndim == 2:
            return g @ bd.T, ad.T @ g
        if ad.ndim == 2:  # matrix @ vector
            return np.outer(g, bd), ad.T @ g
        if bd.ndim == 2:  # vector @ matrix
            return bd @ g, np.outer(ad, g)
        return g * bd, g * ad

    return _node(a.data @ b.data, (a, b), fn)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.shape)
    return _node(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _as_tensor(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _node(data, (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat")
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(t.shape for t in ts)) from None
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(data, ts, fn)


def copy(a) -> Tensor:
    """Value copy that keeps the graph edge (no aliasing of the buffer)."""
    a = _as_tensor(a)
    return _node(a.data.copy(), (a,), lambda g: (g,))


def sum_all(a) -> Tensor:
    a = _as_tensor(a)
    return _node(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean_all(a) -> Tensor:
    a = _as_tensor(a)
    n = a.data.size
    return _node(np.array(a.data.mean()), (a,), lambda g: (np.full(a.shape, g / n),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def fn(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _node(x * cdf, (a,), fn)


def softmax(a) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _node(s, (a,), fn)


def mse_loss(pred, target) -> Tensor:
    """Mean of squared differences over every element."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("mse_loss", pred.shape, target.shape)
    diff = pred.data - target.data
    n = diff.size

    def fn(g):
        gp = g * (2.0 / n) * diff
        return gp, -gp

    return _node(np.array(np.mean(diff * diff)), (pred, target), fn)


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = _as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    x = logits.data
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
        labels = labels.reshape(1)
    if x.ndim != 2 or labels.shape != (x.shape[0],):
        raise ShapeError("cross_entropy", logits.shape, labels.shape)
    z = x - x.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(x.shape[0])
    loss = float(np.mean(logsum - z[rows, labels]))

    def fn(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        p *= g / x.shape[0]
        return (p[0] if squeeze else p,)

    return _node(np.array(loss), (logits,), fn)


def dropout(a, rate: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    """Inverted dropout; identity when not training or ``rate == 0``."""
    a = _as_tensor(a)
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _node(a.data * keep, (a,), lambda g: (g * keep,))


# ----------------------------------------------------------------------------
# reverse pass
# ----------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf with ``requires_grad``."""
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    # free the graph
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None


# ----------------------------------------------------------------------------
# parameters and optimizer
# ----------------------------------------------------------------------------

class ParamStore:
    """Ordered, uniquely named parameter tensors with a frozen flag each."""

    def __init__(self):
        self._params: OrderedDict[str, Tensor] = OrderedDict()
        self._frozen: dict[str, bool] = {}

    def add(self, name: str, tensor: Tensor, frozen: bool = False) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor.name = name
        tensor.requires_grad = not frozen
        self._params[name] = tensor
        self._frozen[name] = frozen
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def names(self) -> list[str]:
        return list(self._params)

    def is_frozen(self, name: str) -> bool:
        return self._frozen[name]

    def trainable(self) -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._params.items() if not self._frozen[n])

    def frozen(self) -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self._params.items() if self._frozen[n])

    def select(self, subset: Callable[[str], bool] | Iterable[str] | None = None) -> list[tuple[str, Tensor]]:
        if subset is None:
            return list(self._params.items())
        if callable(subset):
            return [(n, t) for n, t in self._params.items() if subset(n)]
        wanted = set(subset)
        return [(n, t) for n, t in self._params.items() if n in wanted]

    def set_requires_grad(self, subset, flag: bool) -> None:
        for _, t in self.select(subset):
            t.requires_grad = flag

    def reset_requires_grad(self) -> None:
        """Restore the default: gradients tracked exactly for trainable params."""
        for n, t in self._params.items():
            t.requires_grad = not self._frozen[n]

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def num_params(self, trainable_only: bool = False) -> int:
        return sum(t.size for n, t in self._params.items() if not (trainable_only and self._frozen[n]))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._params.items()}


def flatten_gradients(store: ParamStore, subset=None) -> np.ndarray:
    """Concatenate gradients of the selected params in store order, row-major."""
    parts = []
    for name, t in store.select(subset):
        if t.grad is None:
            raise GradientError(f"parameter {name!r} has no gradient")
        parts.append(t.grad.ravel())
    if not parts:
        return np.zeros(0)
    return np.concatenate(parts)


@dataclass
class AdamWConfig:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01


class AdamW:
    """Adam with decoupled weight decay; moment state keyed by param name."""

    def __init__(self, store: ParamStore, config: AdamWConfig | None = None):
        self.store = store
        self.config = config or AdamWConfig()
        self.lr = self.config.lr
        self.state: dict[str, dict] = {}

    def step(self) -> None:
        cfg = self.config
        b1, b2 = cfg.betas
        for name, p in self.store.trainable():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient in parameter {name!r}")
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = {"t": 0, "m": np.zeros_like(p.data), "v": np.zeros_like(p.data)}
            st["t"] += 1
            t = st["t"]
            p.data *= 1.0 - self.lr * cfg.weight_decay
            st["m"] = b1 * st["m"] + (1.0 - b1) * g
            st["v"] = b2 * st["v"] + (1.0 - b2) * g * g
            m_hat = st["m"] / (1.0 - b1 ** t)
            v_hat = st["v"] / (1.0 - b2 ** t)
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
