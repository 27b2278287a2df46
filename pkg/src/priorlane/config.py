"""Experiment configuration as INI text: one section per concern."""
from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import VARIANTS, ModelConfig
from .synth import SceneRecipe

SEED_ENV = "PRIORLANE_SEED"


def _tuple(text: str, cast=int) -> tuple:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(cast(v) for v in text.replace(",", " ").split())
    except ValueError as exc:
        raise ConfigError(f"cannot parse list {text!r}") from exc


def _fmt(val) -> str:
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, tuple):
        return ", ".join(_fmt(v) for v in val)
    if val is None:
        return ""
    return repr(val) if isinstance(val, float) else str(val)


@dataclass
class ExperimentConfig:
    # [model]
    variant: str = "priorlane-kea"
    knowledge_layers: int = 2
    fusion_layers: int = 2
    fusion_heads: int = 4
    patch_size: int = 20
    embed_dim: int = 32
    decoder_dim: int = 32
    existence_weight: float = 0.1
    class_weights: tuple = (1.0, 3.0, 6.0, 6.0)
    # [data]
    train_path: str = ""
    test_path: str = ""
    train_scenes: int = 200
    train_seed: int = 1000
    test_scenes: int = 50
    test_seed: int = 5000
    label_mode: str = "zjlab"
    perception_range: float = 20.0
    rot_noise_deg: float = 15.0
    trans_noise: float = 0.0
    # [train]
    seeds: tuple = (0, 1, 2)
    learning_rate: float = 2e-3
    weight_decay: float = 0.0
    batch_size: int = 8
    epochs: int = 20
    max_steps: int = 0            # 0: no cap beyond epochs
    warmup_steps: int = 25
    grad_clip: float = 0.0
    # [output]
    out_dir: str = "runs"

    SECTIONS = {
        "model": ("variant", "knowledge_layers", "fusion_layers", "fusion_heads", "patch_size",
                  "embed_dim", "decoder_dim", "existence_weight", "class_weights"),
        "data": ("train_path", "test_path", "train_scenes", "train_seed", "test_scenes", "test_seed",
                 "label_mode", "perception_range", "rot_noise_deg", "trans_noise"),
        "train": ("seeds", "learning_rate", "weight_decay", "batch_size", "epochs", "max_steps",
                  "warmup_steps", "grad_clip"),
        "output": ("out_dir",),
    }

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.batch_size < 1 or self.epochs < 0 or self.max_steps < 0:
            raise ConfigError("batch_size must be >= 1; epochs and max_steps non-negative")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.label_mode not in ("zjlab", "instance"):
            raise ConfigError(f"unknown label_mode {self.label_mode!r}")
        if not self.perception_range > 0:
            raise ConfigError("perception_range must be positive")
        if not (self.train_path or self.train_scenes > 0):
            raise ConfigError("need a training dataset path or a positive scene count")

    @property
    def num_classes(self) -> int:
        return self.recipe().num_classes

    def recipe(self, seed: int = 0) -> SceneRecipe:
        return SceneRecipe(seed=seed, label_mode=self.label_mode, perception_range=self.perception_range,
                           rot_noise_deg=self.rot_noise_deg, trans_noise=self.trans_noise)

    def model_config(self, num_classes: int | None = None, max_lanes: int = 4) -> ModelConfig:
        n = num_classes if num_classes is not None else self.num_classes
        weights = self.class_weights if self.class_weights and len(self.class_weights) == n else None
        return ModelConfig(variant=self.variant, num_classes=n, max_lanes=max_lanes,
                           knowledge_layers=self.knowledge_layers, fusion_layers=self.fusion_layers,
                           fusion_heads=self.fusion_heads, patch_size=self.patch_size,
                           embed_dim=self.embed_dim, decoder_dim=self.decoder_dim,
                           existence_weight=self.existence_weight, class_weights=weights)

    def with_overrides(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    # -- INI ----------------------------------------------------------------------
    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        for section, keys in self.SECTIONS.items():
            cp[section] = {k: _fmt(getattr(self, k)) for k in keys}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, base_dir: Path | None = None) -> "ExperimentConfig":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        known = {k: s for s, keys in cls.SECTIONS.items() for k in keys}
        for section in cp.sections():
            if section not in cls.SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in cp[section].items():
                if known.get(key) != section:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                kw[key] = _parse(key, raw, types[key])
        cfg = cls(**kw)
        if base_dir is not None:
            cfg = cfg.resolved(base_dir)
        return cfg

    @classmethod
    def load(cls, path, env: dict | None = None) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_ini(text, path.parent).apply_env(env)

    def resolved(self, base_dir: Path) -> "ExperimentConfig":
        def fix(p: str) -> str:
            return str((Path(base_dir) / p).resolve()) if p else p
        return replace(self, train_path=fix(self.train_path), test_path=fix(self.test_path),
                       out_dir=fix(self.out_dir))

    def apply_env(self, env: dict | None = None) -> "ExperimentConfig":
        env = os.environ if env is None else env
        raw = env.get(SEED_ENV)
        if raw is None or raw == "":
            return self
        try:
            seeds = _tuple(raw, int)
        except ConfigError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer list, got {raw!r}") from exc
        return replace(self, seeds=seeds)


def _parse(key: str, raw: str, typ: str):
    typ = str(typ)
    try:
        if typ == "int":
            return int(raw)
        if typ == "float":
            return float(raw)
        if key == "seeds":
            return _tuple(raw, int)
        if key == "class_weights":
            return _tuple(raw, float)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc
