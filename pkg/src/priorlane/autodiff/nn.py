"""Parameter containers and the handful of layers the model needs."""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import functional as F
from ..errors import ShapeError
from .tensor import Tensor


def param(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)


class Module:
    """Walks attributes to find parameters and submodules, in insertion order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, val in vars(self).items():
            yield from _walk(val, prefix + key)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _walk(val, name: str):
    if isinstance(val, Tensor):
        if val.requires_grad:
            yield name, val
    elif isinstance(val, Module):
        yield from val.named_parameters(name + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(item, f"{name}.{i}")


class Linear(Module):
    def __init__(self, rng: np.random.Generator, n_in: int, n_out: int,
                 bias: bool = True, zero_init: bool = False, std: float | None = None):
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            w = trunc_normal(rng, (n_in, n_out), std if std is not None else 1.0 / np.sqrt(n_in))
        self.weight = param(w)
        self.bias = param(np.zeros(n_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = param(np.ones(dim))
        self.beta = param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int,
                 stride: int = 1, padding="same", bias: bool = True):
        fan_in = c_in * kernel * kernel
        self.weight = param(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_in, kernel, kernel)))
        self.bias = param(np.zeros(c_out)) if bias else None
        self.kernel = kernel
        self.stride = stride
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        pad = self.padding
        if pad == "same":
            pad = _same_2d(x.shape[-2], x.shape[-1], self.kernel, self.stride)
        return F.conv2d(x, self.weight, self.bias, self.stride, pad)


def _same_2d(h: int, w: int, k: int, s: int):
    ph = F.same_padding(h, k, s)
    pw = F.same_padding(w, k, s)
    if ph != pw:
        raise ShapeError(f"same padding differs between axes for {h}x{w}, kernel {k}, stride {s}")
    return ph
