"""Differentiable ops built on :class:`Tensor` with fused analytic backward passes."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from ..errors import DataError, NumericError, ShapeError
from .tensor import Tensor, matmul

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax; rejects non-finite input."""
    if not np.all(np.isfinite(x.data)):
        raise NumericError("softmax received non-finite input")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._make(y, (x,), back)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    y = z - lse
    p = np.exp(y)
    return Tensor._make(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    v = x.data
    cdf = 0.5 * (1.0 + erf(v / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * v * v)
    return Tensor._make(v * cdf, (x,), lambda g: (g * (cdf + v * pdf),))


def relu(x: Tensor) -> Tensor:
    return x.relu()


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale and shift."""
    v = x.data
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gm, bt = gamma.data, beta.data
    y = xhat * gm + bt

    def back(g):
        dxhat = g * gm
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor._make(y, (x, gamma, beta), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    y = matmul(x.reshape(-1, x.shape[-1]), weight)
    if bias is not None:
        y = y + bias
    return y.reshape(*lead, weight.shape[1])


def _pad_pair(padding) -> tuple[int, int]:
    if isinstance(padding, (tuple, list)):
        before, after = int(padding[0]), int(padding[1])
    else:
        before = after = int(padding)
    if before < 0 or after < 0:
        raise ShapeError(f"padding must be non-negative, got {padding}")
    return before, after


def same_padding(extent: int, kernel: int, stride: int) -> tuple[int, int]:
    """(before, after) padding giving ``ceil(extent / stride)`` outputs exactly."""
    out = -(-extent // stride)
    total = max((out - 1) * stride + kernel - extent, 0)
    return total // 2, total - total // 2


def conv_output_extent(extent: int, kernel: int, stride: int, padding) -> int:
    before, after = _pad_pair(padding)
    span = extent + before + after - kernel
    if span < 0 or span % stride:
        raise ShapeError(
            f"conv2d: extent {extent} with kernel {kernel}, stride {stride}, "
            f"padding {padding} gives a non-integral output extent")
    return span // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding=0) -> Tensor:
    """Cross-correlation of (N,)C,H,W input with O,C,K,K kernels."""
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects (N,)C,H,W input and O,C,K,K kernels, got {x.shape}, {weight.shape}")
    n, c, h, w = xd.shape
    o, cw, k, k2 = weight.shape
    if cw != c or k != k2:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernels {weight.shape}")
    if k % 2 == 0:
        raise ShapeError(f"conv2d: kernel size must be odd, got {k}")
    pb, pa = _pad_pair(padding)
    ho = conv_output_extent(h, k, stride, padding)
    wo = conv_output_extent(w, k, stride, padding)
    xp = np.pad(xd, ((0, 0), (0, 0), (pb, pa), (pb, pa))) if (pb or pa) else xd
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    wmat = weight.data.reshape(o, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, o)
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if squeeze:
        out = out[0]

    def back(g):
        g4 = g[None] if squeeze else g
        g2 = g4.transpose(0, 2, 3, 1).reshape(-1, o)
        gw = (g2.T @ cols).reshape(weight.shape)
        dcols = (g2 @ wmat).reshape(n, ho, wo, c, k, k)
        gx = None
        if x.requires_grad:
            dxp = np.zeros(xp.shape)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = dxp[:, :, pb:pb + h, pb:pb + w]
            if squeeze:
                gx = gx[0]
        gb = g2.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(out, parents, back)


def grid_sample(x: Tensor, grid: Tensor) -> Tensor:
    """Bilinear sampling with align-corners normalised coordinates and zero padding.

    ``x`` is (N,)C,H,W and ``grid`` is (N,)H',W',2 holding (x, y) in [-1, 1];
    -1 and +1 land on the centres of the first and last pixels.
    """
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    gd = grid.data[None] if squeeze else grid.data
    if gd.ndim != 4 or gd.shape[-1] != 2 or gd.shape[0] != xd.shape[0]:
        raise ShapeError(f"grid_sample: grid {grid.shape} incompatible with input {x.shape}")
    n, c, h, w = xd.shape
    _, ho, wo, _ = gd.shape
    sx = 0.5 * (w - 1)
    sy = 0.5 * (h - 1)
    ix = (gd[..., 0] + 1.0) * sx
    iy = (gd[..., 1] + 1.0) * sy
    x0 = np.floor(ix)
    y0 = np.floor(iy)
    fx = ix - x0
    fy = iy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    flat = xd.reshape(n, c, h * w)
    bidx = np.arange(n)[:, None, None]

    corners = []
    for dy, wy, dwy in ((0, 1.0 - fy, -1.0), (1, fy, 1.0)):
        for dx, wx, dwx in ((0, 1.0 - fx, -1.0), (1, fx, 1.0)):
            xi = x0 + dx
            yi = y0 + dy
            valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            lin = np.where(valid, yi * w + xi, 0)
            # (n, ho, wo, c)
            vals = flat.transpose(0, 2, 1)[bidx, lin] * valid[..., None]
            corners.append((lin, valid, wx * wy, dwx * wy, dwy * wx, vals))

    out = np.zeros((n, ho, wo, c))
    for _, _, wgt, _, _, vals in corners:
        out += wgt[..., None] * vals
    result = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if squeeze:
        result = result[0]

    def back(g):
        g4 = (g[None] if squeeze else g).transpose(0, 2, 3, 1)  # n, ho, wo, c
        gx = None
        if x.requires_grad:
            acc = np.zeros((n, h * w, c))
            for lin, valid, wgt, _, _, _ in corners:
                contrib = g4 * (wgt * valid)[..., None]
                np.add.at(acc, (np.broadcast_to(bidx, lin.shape), lin), contrib)
            gx = acc.transpose(0, 2, 1).reshape(n, c, h, w)
            if squeeze:
                gx = gx[0]
        gg = None
        if grid.requires_grad:
            gix = np.zeros((n, ho, wo))
            giy = np.zeros((n, ho, wo))
            for _, _, _, dwdx, dwdy, vals in corners:
                gv = (g4 * vals).sum(axis=-1)
                gix += dwdx * gv
                giy += dwdy * gv
            gg = np.stack([gix * sx, giy * sy], axis=-1)
            if squeeze:
                gg = gg[0]
        return gx, gg

    return Tensor._make(result, (x, grid), back)


def affine_grid(theta: Tensor, height: int, width: int) -> Tensor:
    """Sampling grid (N,H,W,2) for 2x3 affine matrices over align-corners coords."""
    xs = np.linspace(-1.0, 1.0, width) if width > 1 else np.zeros(1)
    ys = np.linspace(-1.0, 1.0, height) if height > 1 else np.zeros(1)
    gx, gy = np.meshgrid(xs, ys)
    base = np.stack([gx, gy, np.ones_like(gx)], axis=-1).reshape(-1, 3)  # HW x 3
    th = theta if theta.ndim == 3 else theta.reshape(1, 2, 3)
    out = matmul(Tensor(base), th.transpose(0, 2, 1))  # N, HW, 2
    return out.reshape(th.shape[0], height, width, 2)


def interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Rows of 1-D linear interpolation weights, align-corners convention."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.linspace(0.0, n_in - 1, n_out) if n_out > 1 else np.zeros(1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def upsample_bilinear(x: Tensor, height: int, width: int) -> Tensor:
    """Resize the last two axes with separable bilinear weights (align corners)."""
    ah = Tensor(interp_matrix(height, x.shape[-2]))
    awt = Tensor(interp_matrix(width, x.shape[-1]).T)
    return matmul(matmul(ah, x), awt)


def avg_pool2d(x: Tensor, k: int) -> Tensor:
    *lead, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    return x.reshape(*lead, h // k, k, w // k, k).mean(axis=(-3, -1))


def cross_entropy(logits: Tensor, target: np.ndarray, axis: int = 1,
                  class_weights: np.ndarray | None = None) -> Tensor:
    """Mean (optionally class-weighted) negative log-likelihood of integer targets."""
    target = np.asarray(target)
    k = logits.shape[axis]
    if target.size and (target.min() < 0 or target.max() >= k):
        raise DataError(f"label index out of range for {k} classes")
    z = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=axis, keepdims=True)
    logp = z - np.log(s)
    t = np.expand_dims(target.astype(np.int64), axis)
    picked = np.take_along_axis(logp, t, axis=axis)
    wt = np.ones_like(picked) if class_weights is None else np.asarray(class_weights, dtype=np.float64)[t]
    denom = wt.sum()
    loss = -(picked * wt).sum() / denom

    def back(g):
        grad = e / s
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, t, 1.0, axis=axis)
        return (g * (grad - onehot) * wt / denom,)

    return Tensor._make(np.asarray(loss), (logits,), back)


def binary_cross_entropy_with_logits(logits: Tensor, target: np.ndarray) -> Tensor:
    z = logits.data
    t = np.asarray(target, dtype=np.float64)
    loss = (np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean()
    n = z.size

    def back(g):
        p = 1.0 / (1.0 + np.exp(-z))
        return (g * (p - t) / n,)

    return Tensor._make(np.asarray(loss), (logits,), back)


def binary_cross_entropy(prob: Tensor, target: np.ndarray, eps: float = 1e-12) -> Tensor:
    t = np.asarray(target, dtype=np.float64)
    p = np.clip(prob.data, eps, 1.0 - eps)
    loss = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p)).mean()
    n = p.size
    return Tensor._make(np.asarray(loss), (prob,),
                        lambda g: (g * (p - t) / (p * (1.0 - p)) / n,))



def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel KxK cross-correlation with same padding; weight is C,K,K."""
    xd = x.data
    c, k, _ = weight.shape
    if xd.shape[-3] != c or k % 2 == 0:
        raise ShapeError(f"depthwise_conv2d: input {x.shape} incompatible with kernels {weight.shape}")
    p = k // 2
    h, w = xd.shape[-2:]
    pad = [(0, 0)] * (xd.ndim - 2) + [(p, p), (p, p)]
    xp = np.pad(xd, pad)
    wd = weight.data
    out = np.zeros(xd.shape)
    for i in range(k):
        for j in range(k):
            out += xp[..., i:i + h, j:j + w] * wd[:, i, j, None, None]
    if bias is not None:
        out = out + bias.data[:, None, None]

    def back(g):
        lead = tuple(range(g.ndim - 3))
        gw = np.empty(wd.shape)
        gxp = np.zeros(xp.shape) if x.requires_grad else None
        for i in range(k):
            for j in range(k):
                gw[:, i, j] = (g * xp[..., i:i + h, j:j + w]).sum(axis=lead + (-2, -1))
                if gxp is not None:
                    gxp[..., i:i + h, j:j + w] += g * wd[:, i, j, None, None]
        gx = gxp[..., p:p + h, p:p + w] if gxp is not None else None
        gb = g.sum(axis=lead + (-2, -1)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(out, parents, back)
