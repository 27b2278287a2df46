"""Registry of finite-difference gradient cases used by ``priorlane gradcheck``.

Every differentiable primitive has a case in scope ``ops``; ``kea`` and
``fusion`` cover the composite modules; ``full`` adds the composed
PriorLane-KEA loss on a miniature configuration.
"""
from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import Tensor, check_gradients, concat, functional as F, max_over, stack
from .autodiff.tensor import where_const
from .fusion import EncoderLayer, FusionTransformer, MultiHeadSelfAttention, attention, fuse
from .kea import KEA, ArfFilterBank, Localizer, align, arf_forward, or_pool
from .model import ModelConfig, PriorLane

SCOPES = ("ops", "kea", "fusion", "full")


@dataclass(frozen=True)
class GradCase:
    name: str
    scope: str
    build: Callable  # rng -> (fn, tensors, max_entries)


@dataclass
class CaseResult:
    name: str
    scope: str
    error: float
    seconds: float
    per_input: dict

    def passed(self, tol: float) -> bool:
        return self.error < tol


REGISTRY: dict[str, GradCase] = {}


def register(name: str, scope: str):
    def deco(build):
        REGISTRY[name] = GradCase(name, scope, build)
        return build
    return deco


def _t(rng, *shape, lo=-2.0, hi=2.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _simple(name: str, fn, *shapes, lo=-2.0, hi=2.0):
    def build(rng):
        ts = [_t(rng, *s, lo=lo, hi=hi) for s in shapes]
        return (lambda: fn(*ts)), ts, None
    register(name, "ops")(build)


# -- primitives -----------------------------------------------------------------------

_simple("add", lambda a, b: a + b, (3, 4), (4,))
_simple("sub", lambda a, b: a - b, (3, 1), (3, 4))
_simple("mul", lambda a, b: a * b, (3, 4), (3, 1))
_simple("div", lambda a, b: a / b, (2, 3), (2, 3), lo=0.5, hi=2.0)
_simple("neg", lambda a: -a, (5,))
_simple("pow", lambda a: a ** 3, (4, 2))
_simple("matmul", lambda a, b: a @ b, (3, 4), (4, 2))
_simple("batched_matmul", lambda a, b: a @ b, (2, 3, 4), (4, 2))
_simple("exp", lambda a: a.exp(), (4, 3))
_simple("log", lambda a: a.log(), (4, 3), lo=0.2, hi=3.0)
_simple("sqrt", lambda a: a.sqrt(), (4, 3), lo=0.2, hi=3.0)
_simple("tanh", lambda a: a.tanh(), (6,))
_simple("sigmoid", lambda a: a.sigmoid(), (6,))
_simple("relu", lambda a: a.relu(), (3, 5))
_simple("sum", lambda a: a.sum(axis=1), (3, 4))
_simple("mean", lambda a: a.mean(axis=(0, 2)), (2, 3, 4))
_simple("max", lambda a: a.max(axis=0), (4, 3))
_simple("max_over", lambda a: max_over(a, 1), (3, 4, 2))
_simple("reshape_transpose", lambda a: a.reshape(4, 3).transpose(1, 0) * 1.5, (2, 6))
_simple("swapaxes", lambda a: a.swapaxes(0, 2) * 2.0, (2, 3, 4))
_simple("getitem", lambda a: a[1:, ::2], (3, 4))
_simple("fancy_index", lambda a: a[:, np.array([2, 0, 2])], (3, 4))
_simple("concat", lambda a, b: concat([a, b], axis=1), (2, 3), (2, 2))
_simple("stack", lambda a, b: stack([a, b], axis=0), (2, 3), (2, 3))
_simple("where_const", lambda a: where_const(np.array([[True, False, True]]), a, 0.5), (2, 3))
_simple("softmax", lambda a: F.softmax(a, axis=-1), (3, 5))
_simple("log_softmax", lambda a: F.log_softmax(a, axis=0), (4, 3))
_simple("gelu", lambda a: F.gelu(a), (4, 5))
_simple("layer_norm", lambda a, g, b: F.layer_norm(a, g, b), (3, 6), (6,), (6,))
_simple("linear", lambda a, w, b: F.linear(a, w, b), (2, 3, 4), (4, 5), (5,))
_simple("conv2d", lambda x, w, b: F.conv2d(x, w, b, stride=1, padding=1), (2, 2, 5, 6), (3, 2, 3, 3), (3,))
_simple("conv2d_strided", lambda x, w: F.conv2d(x, w, stride=2, padding=(1, 2)), (1, 2, 8, 10), (2, 2, 5, 5))
_simple("depthwise_conv2d", lambda x, w, b: F.depthwise_conv2d(x, w, b), (2, 3, 5, 4), (3, 3, 3), (3,))
_simple("upsample_bilinear", lambda a: F.upsample_bilinear(a, 5, 7), (2, 3, 4))
_simple("avg_pool2d", lambda a: F.avg_pool2d(a, 2), (1, 2, 4, 6))


@register("grid_sample", "ops")
def _grid_sample(rng):
    x = _t(rng, 2, 3, 4, 5)
    grid = _t(rng, 2, 3, 4, 2, lo=-1.1, hi=1.1)
    return (lambda: F.grid_sample(x, grid)), [x, grid], None


@register("affine_grid", "ops")
def _affine_grid(rng):
    theta = _t(rng, 2, 2, 3)
    return (lambda: F.affine_grid(theta, 3, 4)), [theta], None


@register("cross_entropy", "ops")
def _ce(rng):
    z = _t(rng, 2, 4, 3, 3)
    target = rng.integers(0, 4, size=(2, 3, 3))
    w = rng.uniform(0.5, 2.0, size=4)
    return (lambda: F.cross_entropy(z, target, class_weights=w)), [z], None


@register("bce_with_logits", "ops")
def _bce_logits(rng):
    z = _t(rng, 6)
    target = rng.integers(0, 2, size=6)
    return (lambda: F.binary_cross_entropy_with_logits(z, target)), [z], None


@register("bce", "ops")
def _bce(rng):
    p = _t(rng, 6, lo=0.1, hi=0.9)
    target = rng.integers(0, 2, size=6)
    return (lambda: F.binary_cross_entropy(p, target)), [p], None


# -- kea --------------------------------------------------------------------------------

def _randomize(module, rng, scale: float = 0.3) -> list[Tensor]:
    """Perturb every parameter (zero-initialised ones included) and return them."""
    params = module.parameters()
    for p in params:
        p.data = p.data + rng.normal(0.0, scale, size=p.shape)
    return params


@register("arf_lifting", "kea")
def _arf_lift(rng):
    bank = ArfFilterBank(rng, 2, 3, orientations=4, kernel=3, lifting=True)
    x = _t(rng, 1, 2, 5, 5)
    return (lambda: arf_forward(x, bank)), [x, bank.weight], None


@register("arf_oriented", "kea")
def _arf_orient(rng):
    bank = ArfFilterBank(rng, 2, 2, orientations=4, kernel=3)
    x = _t(rng, 1, 8, 4, 4)
    return (lambda: arf_forward(x, bank)), [x, bank.weight], None


@register("arf_bilinear_8", "kea")
def _arf8(rng):
    bank = ArfFilterBank(rng, 1, 2, orientations=8, kernel=3, lifting=True)
    x = _t(rng, 1, 1, 4, 4)
    return (lambda: arf_forward(x, bank)), [x, bank.weight], None


@register("or_pool", "kea")
def _orpool(rng):
    f = _t(rng, 2, 8, 3, 3)
    return (lambda: or_pool(f, 4)), [f], None


@register("localizer", "kea")
def _localizer(rng):
    loc = Localizer(rng, 3, 4)
    params = _randomize(loc, rng)
    o = _t(rng, 2, 3, 4, 4)
    return (lambda: loc(o)), [o, *params], None


@register("align", "kea")
def _align(rng):
    tokens = _t(rng, 2, 16, 3)
    theta = Tensor(np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).reshape(1, 2, 3)
                   + rng.normal(0.0, 0.2, size=(2, 2, 3)), requires_grad=True)
    return (lambda: align(tokens, theta, 4)), [tokens, theta], None


@register("kea_module", "kea")
def _kea(rng):
    kea = KEA(rng, 4, 4, orientations=4, kernel=3, features=2, layers=2)
    params = _randomize(kea, rng)
    tokens = _t(rng, 2, 16, 4)
    return (lambda: kea(tokens)), [tokens, *params], 12


# -- fusion --------------------------------------------------------------------------------

@register("attention", "fusion")
def _attention(rng):
    q, k, v = _t(rng, 3, 4), _t(rng, 5, 4), _t(rng, 5, 2)
    return (lambda: attention(q, k, v)), [q, k, v], None


@register("multi_head_attention", "fusion")
def _mhsa(rng):
    m = MultiHeadSelfAttention(rng, 8, 2)
    params = _randomize(m, rng)
    x = _t(rng, 2, 5, 8)
    return (lambda: m(x)), [x, *params], 16


@register("encoder_layer", "fusion")
def _encoder(rng):
    layer = EncoderLayer(rng, 8, 2, mlp_ratio=2)
    params = _randomize(layer, rng)
    x = _t(rng, 2, 4, 8)
    return (lambda: layer(x)), [x, *params], 16


@register("fuse", "fusion")
def _fuse(rng):
    stack_ = FusionTransformer(rng, 8, heads=2, knowledge_layers=1, fusion_layers=1, mlp_ratio=2)
    params = _randomize(stack_, rng)
    img, pri = _t(rng, 2, 3, 8), _t(rng, 2, 4, 8)
    return (lambda: fuse(img, pri, stack_)), [img, pri, *params], 12


# -- composed model -----------------------------------------------------------------------

def mini_config(variant: str = "priorlane-kea") -> ModelConfig:
    return ModelConfig(variant=variant, image_height=32, image_width=64, num_classes=3, max_lanes=2,
                       channels=(4, 8, 8, 8), heads=(1, 1, 2, 2), decoder_dim=8, crop_size=40,
                       patch_size=10, embed_dim=8, knowledge_layers=1, fusion_layers=1,
                       fusion_heads=2, mlp_ratio=2, arf_features=2)


@register("priorlane_kea", "full")
def _priorlane(rng):
    model = PriorLane(mini_config(), seed=int(rng.integers(0, 2**31 - 1)))
    params = _randomize(model, rng, scale=0.05)
    images = Tensor(rng.uniform(0.0, 1.0, size=(2, 3, 32, 64)), requires_grad=True)
    priors = rng.uniform(0.0, 1.0, size=(2, 40, 40, 1))
    labels = rng.integers(0, 3, size=(2, 32, 64))
    exist = rng.integers(0, 2, size=(2, 2))

    def fn():
        return model.loss(model(images, priors), labels, exist)
    return fn, [images, *params], 8


def cases_for(scope: str) -> list[GradCase]:
    if scope not in SCOPES:
        raise ValueError(scope)
    if scope == "full":
        return list(REGISTRY.values())
    return [c for c in REGISTRY.values() if c.scope == scope]


def run_case(case: GradCase, eps: float = 1e-5) -> CaseResult:
    rng = np.random.default_rng(zlib.crc32(case.name.encode()))
    fn, tensors, max_entries = case.build(rng)
    names = [f"input{i}" for i in range(len(tensors))]
    start = time.perf_counter()
    rep = check_gradients(fn, tensors, eps=eps, max_entries=max_entries,
                          seed=zlib.crc32(case.name.encode()) + 1, names=names)
    return CaseResult(case.name, case.scope, max(rep.values()), time.perf_counter() - start, rep)


def run_scope(scope: str, eps: float = 1e-5) -> list[CaseResult]:
    return [run_case(c, eps) for c in cases_for(scope)]
