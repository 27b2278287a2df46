"""Miniature mixed-transformer segmenter, decode head, and the PriorLane variants.

Variants share one graph:

* ``mit-lane``      image path only; the decode head's fused input is zero.
* ``priorlane-ke``  knowledge embedding -> knowledge encoder -> fusion encoder.
* ``priorlane-kea`` as above with the embedding aligned by KEA first.
* ``priorlane-imp`` KEA graph fed a learned constant token grid instead of the
  embedding of the actual prior.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Tensor, concat, functional as F
from .autodiff.nn import Conv2d, LayerNorm, Linear, Module, param, trunc_normal
from .errors import ConfigError, ShapeError
from .fusion import FusionTransformer
from .kea import KEA
from .prior import patchify

VARIANTS = ("mit-lane", "priorlane-imp", "priorlane-ke", "priorlane-kea")


@dataclass
class ModelConfig:
    variant: str = "priorlane-kea"
    image_height: int = 64
    image_width: int = 128
    num_classes: int = 4
    max_lanes: int = 4
    channels: tuple = (16, 32, 64, 128)
    depths: tuple = (1, 1, 1, 1)
    heads: tuple = (1, 2, 4, 8)
    reductions: tuple = (8, 4, 2, 1)
    patch_kernels: tuple = (7, 3, 3, 3)
    strides: tuple = (4, 2, 2, 2)
    mlp_ratio: int = 4
    decoder_dim: int = 32
    crop_size: int = 200
    prior_channels: int = 1
    patch_size: int = 10
    embed_dim: int = 64
    knowledge_layers: int = 4
    fusion_layers: int = 4
    fusion_heads: int = 8
    orientations: int = 4
    arf_kernel: int = 3
    arf_features: int = 4
    arf_layers: int = 2
    existence_weight: float = 0.1
    class_weights: tuple | None = None

    def __post_init__(self):
        for name in ("channels", "depths", "heads", "reductions", "patch_kernels", "strides"):
            val = tuple(int(v) for v in getattr(self, name))
            if len(val) != 4:
                raise ConfigError(f"{name} needs one entry per stage (4), got {val}")
            setattr(self, name, val)
        if self.class_weights is not None:
            self.class_weights = tuple(float(v) for v in self.class_weights)
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if math.prod(self.strides) != 32:
            raise ConfigError(f"stage strides must multiply to 32, got {self.strides}")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes")
        if self.uses_prior and self.crop_size % self.patch_size:
            raise ConfigError(f"patch size {self.patch_size} does not divide crop size {self.crop_size}")
        if self.uses_prior and self.embed_dim % self.fusion_heads:
            raise ConfigError(f"embed dim {self.embed_dim} not divisible by {self.fusion_heads} heads")
        if self.class_weights is not None and len(self.class_weights) != self.num_classes:
            raise ConfigError("class_weights needs one entry per class")

    @property
    def uses_prior(self) -> bool:
        return self.variant != "mit-lane"

    @property
    def uses_kea(self) -> bool:
        return self.variant in ("priorlane-kea", "priorlane-imp")

    @property
    def token_grid(self) -> int:
        return self.crop_size // self.patch_size

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SegOutput:
    logits: Tensor      # B, K, H/4, W/4
    existence: Tensor   # B, max_lanes
    fused: Tensor | None = None
    features: list = field(default_factory=list)

    def upsampled(self, height: int, width: int) -> Tensor:
        return F.upsample_bilinear(self.logits, height, width)


# -- backbone -------------------------------------------------------------------

def tokens_to_map(x: Tensor, h: int, w: int) -> Tensor:
    b, _, c = x.shape
    return x.reshape(b, h, w, c).transpose(0, 3, 1, 2)


def map_to_tokens(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return x.transpose(0, 2, 3, 1).reshape(b, h * w, c)


class SpatialReductionAttention(Module):
    """Multi-head attention whose keys/values come from an sr x sr average-pooled map."""

    def __init__(self, rng, dim: int, heads: int, reduction: int):
        if dim % heads:
            raise ConfigError(f"stage dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.reduction = reduction
        self.q = Linear(rng, dim, dim)
        self.kv = Linear(rng, dim, 2 * dim)
        self.out = Linear(rng, dim, dim)
        self.norm = LayerNorm(dim) if reduction > 1 else None

    def __call__(self, x: Tensor, h: int, w: int) -> Tensor:
        b, n, d = x.shape
        nh, dh = self.heads, d // self.heads
        q = self.q(x).reshape(b, n, nh, dh).transpose(0, 2, 1, 3)
        src = x
        if self.reduction > 1:
            if h % self.reduction or w % self.reduction:
                raise ShapeError(f"stage map {h}x{w} not divisible by reduction {self.reduction}")
            src = map_to_tokens(F.avg_pool2d(tokens_to_map(x, h, w), self.reduction))
            src = self.norm(src)
        m = src.shape[1]
        kv = self.kv(src).reshape(b, m, 2, nh, dh).transpose(2, 0, 3, 1, 4)
        att = F.softmax((q @ kv[0].swapaxes(-1, -2)) * (1.0 / math.sqrt(dh)), axis=-1)
        ctx = (att @ kv[1]).transpose(0, 2, 1, 3).reshape(b, n, d)
        return self.out(ctx)


class MixFFN(Module):
    def __init__(self, rng, dim: int, ratio: int):
        hidden = dim * ratio
        self.fc1 = Linear(rng, dim, hidden)
        self.dw = param(rng.normal(0.0, math.sqrt(2.0 / 9), size=(hidden, 3, 3)))
        self.dw_b = param(np.zeros(hidden))
        self.fc2 = Linear(rng, hidden, dim)

    def __call__(self, x: Tensor, h: int, w: int) -> Tensor:
        y = tokens_to_map(self.fc1(x), h, w)
        y = F.gelu(F.depthwise_conv2d(y, self.dw, self.dw_b))
        return self.fc2(map_to_tokens(y))


class MiTBlock(Module):
    def __init__(self, rng, dim: int, heads: int, reduction: int, ratio: int):
        self.norm1 = LayerNorm(dim)
        self.attn = SpatialReductionAttention(rng, dim, heads, reduction)
        self.norm2 = LayerNorm(dim)
        self.ffn = MixFFN(rng, dim, ratio)

    def __call__(self, x: Tensor, h: int, w: int) -> Tensor:
        x = x + self.attn(self.norm1(x), h, w)
        return x + self.ffn(self.norm2(x), h, w)


class Stage(Module):
    def __init__(self, rng, c_in: int, c_out: int, kernel: int, stride: int,
                 depth: int, heads: int, reduction: int, ratio: int):
        self.embed = Conv2d(rng, c_in, c_out, kernel, stride=stride, padding="same")
        self.embed_norm = LayerNorm(c_out)
        self.blocks = [MiTBlock(rng, c_out, heads, reduction, ratio) for _ in range(depth)]
        self.norm = LayerNorm(c_out)

    def __call__(self, x: Tensor) -> tuple[Tensor, Tensor]:
        m = self.embed(x)
        _, _, h, w = m.shape
        t = self.embed_norm(map_to_tokens(m))
        for blk in self.blocks:
            t = blk(t, h, w)
        t = self.norm(t)
        return t, tokens_to_map(t, h, w)


class Backbone(Module):
    def __init__(self, rng, cfg: ModelConfig):
        c_prev = 3
        self.stages = []
        for i in range(4):
            self.stages.append(Stage(rng, c_prev, cfg.channels[i], cfg.patch_kernels[i], cfg.strides[i],
                                     cfg.depths[i], cfg.heads[i], cfg.reductions[i], cfg.mlp_ratio))
            c_prev = cfg.channels[i]

    def __call__(self, image: Tensor) -> list[Tensor]:
        return backbone_forward(image, self)


def backbone_forward(image: Tensor, backbone: Backbone) -> list[Tensor]:
    """Four (B, C_s, H/stride_s, W/stride_s) maps at strides 4, 8, 16, 32."""
    if image.ndim == 3:
        image = image.reshape(1, *image.shape)
    h, w = image.shape[-2:]
    if h % 32 or w % 32:
        raise ShapeError(f"image extent {h}x{w} must be divisible by 32")
    feats = []
    x = image
    for stage in backbone.stages:
        _, x = stage(x)
        feats.append(x)
    return feats


# -- decode head ----------------------------------------------------------------

class DecodeHead(Module):
    """Project every stage and the fused feature to a common width, upsample to
    stride 4, concatenate, mix, classify; plus a lane-existence branch."""

    def __init__(self, rng, in_channels, fused_dim: int, dim: int, num_classes: int, max_lanes: int):
        self.proj = [Linear(rng, c, dim) for c in in_channels]
        self.fused_proj = Linear(rng, fused_dim, dim)
        self.mix = Linear(rng, dim * (len(in_channels) + 1), dim)
        self.classifier = Linear(rng, dim, num_classes)
        self.exist = Linear(rng, dim, max_lanes)

    def mixed(self, stage_feats: list[Tensor], fused: Tensor | None) -> Tensor:
        """Pre-activation of the mixing layer, (B, h4, w4, dim)."""
        b, _, h4, w4 = stage_feats[0].shape
        parts = []
        for feat, proj in zip(stage_feats, self.proj):
            p = proj(feat.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)
            if p.shape[-2:] != (h4, w4):
                p = F.upsample_bilinear(p, h4, w4)
            parts.append(p)
        if fused is None:
            # zero fused input: only the projection bias survives
            zeros = Tensor(np.zeros((b, h4, w4, self.fused_proj.weight.shape[0])))
            fp = self.fused_proj(zeros).transpose(0, 3, 1, 2)
        else:
            fp = self.fused_proj(fused.transpose(0, 2, 3, 1)).transpose(0, 3, 1, 2)
            fp = F.upsample_bilinear(fp, h4, w4)
        parts.append(fp)
        cat = concat(parts, axis=1).transpose(0, 2, 3, 1)
        return self.mix(cat)

    def __call__(self, stage_feats: list[Tensor], fused: Tensor | None) -> SegOutput:
        return decode_head(stage_feats, fused, self)


def decode_head(stage_feats: list[Tensor], fused: Tensor | None, head: DecodeHead) -> SegOutput:
    hidden = head.mixed(stage_feats, fused).relu()
    logits = head.classifier(hidden).transpose(0, 3, 1, 2)
    existence = head.exist(hidden.mean(axis=(1, 2)))
    return SegOutput(logits, existence, fused, stage_feats)


def segmentation_loss(out: SegOutput, labels: np.ndarray, existence: np.ndarray | None,
                      existence_weight: float = 0.1, class_weights=None) -> Tensor:
    """Pixel cross-entropy at full label resolution + weighted existence BCE."""
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = labels[None]
    h, w = labels.shape[-2:]
    logits = out.upsampled(h, w)
    loss = F.cross_entropy(logits, labels, axis=1,
                           class_weights=None if class_weights is None else np.asarray(class_weights))
    if existence is not None and existence_weight:
        ex = np.asarray(existence, dtype=np.float64).reshape(out.existence.shape)
        loss = loss + existence_weight * F.binary_cross_entropy_with_logits(out.existence, ex)
    return loss


# -- full model -----------------------------------------------------------------

class PriorLane(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.backbone = Backbone(rng, cfg)
        d = cfg.embed_dim
        self.head = DecodeHead(rng, cfg.channels, d, cfg.decoder_dim, cfg.num_classes, cfg.max_lanes)
        self.projection = None
        self.imp_tokens = None
        self.kea = None
        self.img_proj = None
        self.fusion = None
        if cfg.uses_prior:
            patch_in = cfg.patch_size ** 2 * cfg.prior_channels
            self.projection = param(trunc_normal(rng, (patch_in, d), 1.0 / math.sqrt(patch_in)))
            if cfg.variant == "priorlane-imp":
                self.imp_tokens = param(rng.normal(0.0, 1.0, size=(cfg.token_grid ** 2, d)))
            if cfg.uses_kea:
                self.kea = KEA(rng, d, cfg.token_grid, cfg.orientations, cfg.arf_kernel,
                               cfg.arf_features, cfg.arf_layers)
            self.img_proj = Linear(rng, cfg.channels[-1], d)
            self.fusion = FusionTransformer(rng, d, cfg.fusion_heads, cfg.knowledge_layers,
                                            cfg.fusion_layers, cfg.mlp_ratio)

    def knowledge_tokens(self, priors: np.ndarray | None, batch: int) -> Tensor:
        cfg = self.cfg
        if cfg.variant == "priorlane-imp":
            x = self.imp_tokens.reshape(1, *self.imp_tokens.shape)
            x = x + Tensor(np.zeros((batch, 1, 1)))
        else:
            if priors is None:
                raise ConfigError(f"variant {cfg.variant} needs prior crops")
            rows = patchify(np.asarray(priors, dtype=np.float64), cfg.patch_size)
            x = F.linear(Tensor(rows), self.projection)
        if self.kea is not None:
            x = self.kea(x)
        return x

    def __call__(self, images, priors=None) -> SegOutput:
        img = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=np.float64))
        if img.ndim == 3:
            img = img.reshape(1, *img.shape)
        if priors is not None and np.ndim(priors) == 3:
            priors = np.asarray(priors)[None]
        feats = backbone_forward(img, self.backbone)
        fused = None
        if self.cfg.uses_prior:
            last = feats[-1]
            b, c, h, w = last.shape
            img_tokens = self.img_proj(map_to_tokens(last))
            prior_tokens = self.knowledge_tokens(priors, b)
            fused_tokens = self.fusion(img_tokens, prior_tokens)
            fused = tokens_to_map(fused_tokens, h, w)
        return decode_head(feats, fused, self.head)

    def loss(self, out: SegOutput, labels, existence=None) -> Tensor:
        return segmentation_loss(out, labels, existence, self.cfg.existence_weight, self.cfg.class_weights)
