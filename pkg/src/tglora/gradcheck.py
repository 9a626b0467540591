"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


def numeric_grad(f: Callable[[], Tensor], t: Tensor, step: float = 1e-5,
                 index: Sequence[tuple[int, ...]] | None = None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``t`` (all, or only ``index``)."""
    out = np.zeros_like(t.data)
    coords = list(np.ndindex(t.shape)) if index is None else list(index)
    for i in coords:
        old = t.data[i]
        t.data[i] = old + step
        hi = float(f().data)
        t.data[i] = old - step
        lo = float(f().data)
        t.data[i] = old
        out[i] = (hi - lo) / (2 * step)
    return out


# central differences at step 1e-5 cannot resolve gradients much below this
NOISE_FLOOR = 1e-8


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = NOISE_FLOOR) -> float:
    """max |a - b| over max(|a|, |b|, floor)."""
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), floor)
    return float(np.max(np.abs(a - b)) / scale)


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5) -> float:
    """Relative error between backward() and central differences over the joint gradient vector.

    The error is ``max |analytic - numeric|`` over every entry of every
    param, divided by the largest gradient magnitude. ``f`` must rebuild the
    graph on each call and be deterministic.
    """
    for p in params:
        p.grad = None
    ad.backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    numeric = [numeric_grad(f, p, step) for p in params]
    for p in params:
        p.grad = None
    if not params:
        return 0.0
    return relative_error(np.concatenate([a.ravel() for a in analytic]),
                          np.concatenate([n.ravel() for n in numeric]))
