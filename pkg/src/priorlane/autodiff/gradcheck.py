"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> float:
    """Worst elementwise relative error; entries below ``floor`` in magnitude
    are compared absolutely."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(a), np.abs(n))
    scale = np.where(scale < floor, 1.0, scale)
    return float(np.max(np.abs(a - n) / scale)) if a.size else 0.0


def _scalarize(out: Tensor, weights: np.ndarray) -> Tensor:
    if out.size == 1:
        return out.sum()
    return (out * Tensor(weights)).sum()


def numeric_gradient(fn: Callable[[], Tensor], t: Tensor, weights: np.ndarray | None,
                     eps: float, index: np.ndarray) -> np.ndarray:
    flat = t.data.reshape(-1)
    out = np.zeros(len(index))
    with no_grad():
        for j, i in enumerate(index):
            orig = flat[i]
            flat[i] = orig + eps
            up = _scalarize(fn(), weights).item()
            flat[i] = orig - eps
            down = _scalarize(fn(), weights).item()
            flat[i] = orig
            out[j] = (up - down) / (2.0 * eps)
    return out


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5,
                    max_entries: int | None = None, seed: int = 0,
                    names: Sequence[str] | None = None) -> dict[str, float]:
    """Compare backward() against central differences for every tensor.

    ``fn`` is re-evaluated from scratch for each perturbation, so it must read
    the tensors' current ``.data``. Non-scalar outputs are contracted with a
    fixed random weighting. With ``max_entries`` set, only a seeded random
    subset of each tensor's entries is perturbed.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    out = fn()
    weights = rng.uniform(-1.0, 1.0, size=out.shape) if out.size > 1 else None
    _scalarize(out, weights).backward()
    names = list(names) if names is not None else [f"input{i}" for i in range(len(tensors))]
    report = {}
    for name, t in zip(names, tensors):
        n = t.size
        if max_entries is not None and n > max_entries:
            index = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            index = np.arange(n)
        analytic = (t.grad if t.grad is not None else np.zeros(t.shape)).reshape(-1)[index]
        numeric = numeric_gradient(fn, t, weights, eps, index)
        report[name] = relative_error(analytic, numeric)
    return report
