"""Knowledge Embedding Alignment.

Active rotation filters (ARFs) extract orientation-sensitive responses from the
knowledge embedding, ORPooling keeps their rotation-invariant part, a small
localisation head regresses a 2x3 affine matrix, and the original embedding is
resampled with that matrix.
"""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .autodiff import Tensor, concat, functional as F, max_over
from .autodiff.nn import Linear, Module, param
from .errors import ShapeError
from .prior import KnowledgeEmbedding

IDENTITY_AFFINE = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


@lru_cache(maxsize=None)
def rotation_operator(k: int, theta: float) -> np.ndarray:
    """(K*K, K*K) matrix taking a flattened kernel to its copy rotated by theta.

    Rotation is counter-clockwise as displayed (np.rot90 convention). Multiples
    of 90 degrees are exact index permutations; other angles use bilinear
    interpolation with zeros outside the kernel support.
    """
    c = (k - 1) / 2.0
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    quarter = theta / (math.pi / 2)
    exact = abs(quarter - round(quarter)) < 1e-12
    if exact:
        cos_t, sin_t = float(round(cos_t)), float(round(sin_t))
    m = np.zeros((k * k, k * k))
    for i in range(k):
        for j in range(k):
            y, x = i - c, j - c
            ys = sin_t * x + cos_t * y + c
            xs = cos_t * x - sin_t * y + c
            if exact:
                m[i * k + j, int(round(ys)) * k + int(round(xs))] = 1.0
                continue
            y0, x0 = math.floor(ys), math.floor(xs)
            for yy, wy in ((y0, 1 - (ys - y0)), (y0 + 1, ys - y0)):
                for xx, wx in ((x0, 1 - (xs - x0)), (x0 + 1, xs - x0)):
                    if 0 <= yy < k and 0 <= xx < k and wy * wx > 0:
                        m[i * k + j, yy * k + xx] += wy * wx
    return m


class ArfFilterBank(Module):
    """Canonical kernels of shape (C_out, C_in, N_in, K, K).

    ``N_in`` is either 1 (lifting layer: input has no orientation channels) or
    equal to ``orientations``. Rotated copies are rebuilt from the canonical
    weights on every call.
    """

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int,
                 orientations: int = 4, kernel: int = 3, lifting: bool = False,
                 weight: np.ndarray | None = None):
        if orientations < 1:
            raise ShapeError("an ARF needs at least one orientation")
        if kernel % 2 == 0:
            raise ShapeError(f"ARF kernel size must be odd, got {kernel}")
        self.orientations = orientations
        self.kernel = kernel
        self.n_in = 1 if lifting else orientations
        shape = (c_out, c_in, self.n_in, kernel, kernel)
        if weight is None:
            fan_in = c_in * self.n_in * kernel * kernel
            weight = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
        weight = np.asarray(weight, dtype=np.float64)
        if weight.shape != shape:
            raise ShapeError(f"ARF weight shape {weight.shape} != {shape}")
        self.weight = param(weight)

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    def materialize(self) -> Tensor:
        """Conv kernels (C_out*N, C_in*N_in, K, K); output channel o*N + i is
        orientation i of feature o."""
        n, k = self.orientations, self.kernel
        co, ci, ni = self.c_out, self.c_in, self.n_in
        flat = self.weight.reshape(co * ci * ni, k * k)
        copies = []
        for i in range(n):
            rot = (flat @ Tensor(rotation_operator(k, i * 2 * math.pi / n).T)).reshape(co, ci, ni, k, k)
            if ni > 1:
                rot = rot[:, :, (np.arange(ni) - i) % ni]
            copies.append(rot.reshape(co, 1, ci * ni, k, k))
        return concat(copies, axis=1).reshape(co * n, ci * ni, k, k)

    def __call__(self, x: Tensor) -> Tensor:
        return arf_forward(x, self)


def arf_forward(x: Tensor, bank: ArfFilterBank) -> Tensor:
    """Orientation responses F^(i) = sum_n R_theta_i^(n) * X^(n), same padding."""
    expected = bank.c_in * bank.n_in
    if x.shape[-3] != expected:
        raise ShapeError(f"ARF expects {expected} input channels, got {x.shape[-3]}")
    p = bank.kernel // 2
    return F.conv2d(x, bank.materialize(), stride=1, padding=p)


def or_pool(f: Tensor, orientations: int) -> Tensor:
    """Max over the orientation channels of each feature: (B,) C*N,H,W -> (B,) C,H,W."""
    *lead, cn, h, w = f.shape
    if cn % orientations:
        raise ShapeError(f"{cn} channels are not a multiple of {orientations} orientations")
    grouped = f.reshape(*lead, cn // orientations, orientations, h, w)
    return max_over(grouped, axis=len(lead) + 1)


class Localizer(Module):
    """conv -> ReLU -> avg-pool -> linear -> ReLU -> linear(6).

    The final layer starts at zero weight with the identity affine as bias.
    """

    def __init__(self, rng: np.random.Generator, c_in: int, grid: int, hidden: int = 8, fc: int = 32):
        self.pool = grid // 2 if grid % 2 == 0 and grid >= 2 else grid
        pooled = (grid // self.pool) ** 2
        fan_in = c_in * 9
        self.conv_w = param(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(hidden, c_in, 3, 3)))
        self.conv_b = param(np.zeros(hidden))
        self.fc1 = Linear(rng, hidden * pooled, fc)
        self.fc2 = Linear(rng, fc, 6, zero_init=True)
        self.fc2.bias.data = IDENTITY_AFFINE.copy()

    def __call__(self, o: Tensor) -> Tensor:
        single = o.ndim == 3
        if single:
            o = o.reshape(1, *o.shape)
        h = F.conv2d(o, self.conv_w, self.conv_b, padding=1).relu()
        h = F.avg_pool2d(h, self.pool)
        h = self.fc1(h.reshape(h.shape[0], -1)).relu()
        theta = self.fc2(h).reshape(-1, 2, 3)
        return theta[0] if single else theta


def align(x: KnowledgeEmbedding | Tensor, params: Tensor, grid: int | None = None) -> Tensor:
    """Resample the token grid of ``x`` with affine ``params`` (2x3 or B x 2 x 3)."""
    tokens = x.tokens if isinstance(x, KnowledgeEmbedding) else x
    g = grid if grid is not None else (x.grid if isinstance(x, KnowledgeEmbedding) else None)
    single = tokens.ndim == 2
    if single:
        tokens = tokens.reshape(1, *tokens.shape)
        params = params.reshape(1, 2, 3)
    b, length, e = tokens.shape
    if g is None:
        g = int(round(math.sqrt(length)))
    if g * g != length:
        raise ShapeError(f"{length} tokens do not form a square grid")
    img = tokens.reshape(b, g, g, e).transpose(0, 3, 1, 2)
    sampling = F.affine_grid(params, g, g)
    out = F.grid_sample(img, sampling).transpose(0, 2, 3, 1).reshape(b, length, e)
    return out[0] if single else out


class KEA(Module):
    """Two ARF layers (lifting then oriented), ORPooling, localisation, resampling."""

    def __init__(self, rng: np.random.Generator, embed_dim: int, grid: int,
                 orientations: int = 4, kernel: int = 3, features: int = 4, layers: int = 2):
        self.orientations = orientations
        self.grid = grid
        banks = [ArfFilterBank(rng, embed_dim, features, orientations, kernel, lifting=True)]
        for _ in range(layers - 1):
            banks.append(ArfFilterBank(rng, features, features, orientations, kernel))
        self.banks = banks
        self.localizer = Localizer(rng, features, grid)

    def features(self, tokens: Tensor) -> Tensor:
        """Rotation-invariant map O, (B, features, g, g)."""
        b, length, e = tokens.shape
        h = tokens.reshape(b, self.grid, self.grid, e).transpose(0, 3, 1, 2)
        for i, bank in enumerate(self.banks):
            h = bank(h)
            if i < len(self.banks) - 1:
                h = h.relu()
        return or_pool(h, self.orientations)

    def affine(self, tokens: Tensor) -> Tensor:
        return self.localizer(self.features(tokens))

    def __call__(self, tokens: Tensor) -> Tensor:
        return align(tokens, self.affine(tokens), self.grid)
