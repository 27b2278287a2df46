"""Knowledge encoder and fusion encoder stacks.

No positional encoding is used anywhere: prior tokens act as an unordered set
of prompts for the image tokens.
"""
from __future__ import annotations

import math

import numpy as np

from .autodiff import Tensor, concat, functional as F
from .autodiff.nn import LayerNorm, Linear, Module
from .errors import ConfigError


class MultiHeadSelfAttention(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int, zero_out: bool = True):
        if dim % heads:
            raise ConfigError(f"model dim {dim} is not divisible by {heads} heads")
        self.heads = heads
        self.dim = dim
        self.qkv = Linear(rng, dim, 3 * dim)
        self.out = Linear(rng, dim, dim, zero_init=zero_out)

    def _split(self, x: Tensor):
        b, n, d = x.shape
        h, dh = self.heads, d // self.heads
        qkv = self.qkv(x).reshape(b, n, 3, h, dh).transpose(2, 0, 3, 1, 4)
        return qkv[0], qkv[1], qkv[2]

    def weights(self, x: Tensor) -> Tensor:
        """Attention probabilities (B, heads, n, n)."""
        q, k, _ = self._split(x)
        return scaled_attention_weights(q, k)

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[1] == 0:
            raise ConfigError("self-attention over an empty token sequence")
        b, n, d = x.shape
        q, k, v = self._split(x)
        ctx = scaled_attention_weights(q, k) @ v  # b, h, n, dh
        return self.out(ctx.transpose(0, 2, 1, 3).reshape(b, n, d))


def scaled_attention_weights(q: Tensor, k: Tensor) -> Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    return F.softmax((q @ k.swapaxes(-1, -2)) * scale, axis=-1)


def attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Softmax(Q K^T / sqrt(d_k)) V for single-head (n, d) operands."""
    return scaled_attention_weights(q, k) @ v


class EncoderLayer(Module):
    """Pre-norm block: x + attn(norm(x)), then x + ffn(norm(x)) with GELU."""

    def __init__(self, rng: np.random.Generator, dim: int, heads: int, mlp_ratio: int = 4,
                 zero_init: bool = True):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(rng, dim, heads, zero_out=zero_init)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, dim * mlp_ratio)
        self.fc2 = Linear(rng, dim * mlp_ratio, dim, zero_init=zero_init)

    def __call__(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


def encoder_layer(x: Tensor, layer: EncoderLayer) -> Tensor:
    return layer(x)


class FusionTransformer(Module):
    def __init__(self, rng: np.random.Generator, dim: int, heads: int = 8,
                 knowledge_layers: int = 4, fusion_layers: int = 4, mlp_ratio: int = 4):
        self.dim = dim
        self.knowledge = [EncoderLayer(rng, dim, heads, mlp_ratio) for _ in range(knowledge_layers)]
        self.fusion = [EncoderLayer(rng, dim, heads, mlp_ratio) for _ in range(fusion_layers)]

    def refine(self, prior_tokens: Tensor) -> Tensor:
        for layer in self.knowledge:
            prior_tokens = layer(prior_tokens)
        return prior_tokens

    def __call__(self, img_tokens: Tensor, prior_tokens: Tensor | None) -> Tensor:
        return fuse(img_tokens, prior_tokens, self)


def fuse(img_tokens: Tensor, prior_tokens: Tensor | None, stack: FusionTransformer) -> Tensor:
    """Refine prior tokens, run fusion layers over [img; prior], keep the image part."""
    if img_tokens.shape[-1] != stack.dim:
        raise ConfigError(f"image tokens have dim {img_tokens.shape[-1]}, fusion expects {stack.dim}")
    n_img = img_tokens.shape[1]
    if prior_tokens is None:
        seq = img_tokens
    else:
        if prior_tokens.shape[-1] != stack.dim:
            raise ConfigError(f"prior tokens have dim {prior_tokens.shape[-1]}, fusion expects {stack.dim}")
        seq = concat([img_tokens, stack.refine(prior_tokens)], axis=1)
    for layer in stack.fusion:
        seq = layer(seq)
    return seq[:, :n_img] if prior_tokens is not None else seq
