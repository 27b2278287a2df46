"""Seeded training, evaluation and checkpoint I/O for PriorLane models."""
from __future__ import annotations

import json
import logging
import math
import sys
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Adam, load_checkpoint, no_grad, save_checkpoint
from .autodiff.optim import clip_grad_norm
from .config import ExperimentConfig
from .errors import ConfigError, DataError, NumericError
from .metrics import EvalReport, culane_f1, decode_lanes, lanes_from_label, miou, tusimple_accuracy
from .model import ModelConfig, PriorLane
from .synth import ZJLAB_CLASSES, Dataset, generate_dataset, read_dataset, recipes_for

log = logging.getLogger(__name__)

CONFIG_KEY = "__model_config__"
PROTOCOLS = ("miou", "culane-f1", "tusimple")


@dataclass
class TrainResult:
    model: PriorLane
    history: list = field(default_factory=list)
    final_loss: float = float("nan")
    best_miou: float | None = None
    steps: int = 0


# -- data ---------------------------------------------------------------------------

def load_datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset | None]:
    """Training and test splits, read from disk or synthesised from the config."""
    if cfg.train_path:
        train = read_dataset(cfg.train_path)
        test = read_dataset(cfg.test_path) if cfg.test_path else None
        return train, test
    base = cfg.recipe()
    train = Dataset(generate_dataset(recipes_for(base, cfg.train_scenes, cfg.train_seed)),
                    base.num_classes, base.max_lanes)
    test = None
    if cfg.test_scenes > 0:
        test = Dataset(generate_dataset(recipes_for(base, cfg.test_scenes, cfg.test_seed)),
                       base.num_classes, base.max_lanes)
    return train, test


def check_compatible(model_cfg: ModelConfig, ds: Dataset) -> None:
    if ds.num_classes != model_cfg.num_classes:
        raise ConfigError(f"model predicts {model_cfg.num_classes} classes, dataset has {ds.num_classes}")
    if ds.max_lanes != model_cfg.max_lanes:
        raise ConfigError(f"model has {model_cfg.max_lanes} lane slots, dataset has {ds.max_lanes}")
    if model_cfg.uses_prior and len(ds) and ds[0].prior.cells.shape[0] != model_cfg.crop_size:
        raise ConfigError("dataset prior crops do not match the model crop size")


def _batches(n: int, batch: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def lr_at(step: int, total: int, base: float, warmup: int) -> float:
    """Linear warm-up then cosine decay to zero."""
    warm = min(1.0, (step + 1) / warmup) if warmup > 0 else 1.0
    frac = step / max(total, 1)
    return base * warm * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))


# -- training -----------------------------------------------------------------------

def _grad_norms(model: PriorLane) -> dict:
    out = {}
    for name, p in model.named_parameters():
        g = p.grad
        if g is None:
            out[name] = None
            continue
        with np.errstate(over="ignore", invalid="ignore"):
            norm = float(np.sqrt(np.sum(g * g)))
        out[name] = norm if math.isfinite(norm) else repr(norm)
    return out


def train_model(cfg: ExperimentConfig, train: Dataset, val: Dataset | None = None, seed: int = 0,
                log_path=None, checkpoint_path=None, model_cfg: ModelConfig | None = None,
                eval_every: int = 1) -> TrainResult:
    """Adam on pixel cross-entropy + existence BCE.

    Every epoch appends a JSON line {epoch, step, loss, lr, val_miou}; the best
    validation mIoU (or the final state without validation) is checkpointed.
    """
    model_cfg = model_cfg or cfg.model_config(train.num_classes, train.max_lanes)
    check_compatible(model_cfg, train)
    if val is not None:
        check_compatible(model_cfg, val)
    model = PriorLane(model_cfg, seed)
    params = model.parameters()
    opt = Adam(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([seed, 7])
    per_epoch = math.ceil(len(train) / cfg.batch_size)
    total = cfg.epochs * per_epoch
    if cfg.max_steps:
        total = min(total, cfg.max_steps) if cfg.epochs else cfg.max_steps
    epochs = math.ceil(total / per_epoch) if per_epoch else 0
    result = TrainResult(model)
    log_file = open(log_path, "w") if log_path else None
    best = -1.0
    step = 0
    try:
        for epoch in range(epochs):
            losses = []
            for idx in _batches(len(train), cfg.batch_size, rng):
                if step >= total:
                    break
                images, labels, exist, priors = train.batch(idx)
                opt.state.learning_rate = lr_at(step, total, cfg.learning_rate, cfg.warmup_steps)
                try:
                    out = model(images, priors if model_cfg.uses_prior else None)
                    loss = model.loss(out, labels, exist)
                except NumericError as exc:
                    # gradients still hold the step that produced the bad weights
                    _abort(model, float("nan"), step, log_file, str(exc))
                model.zero_grad()
                loss.backward()
                value = float(loss.data)
                if not math.isfinite(value):
                    _abort(model, value, step, log_file)
                if cfg.grad_clip:
                    clip_grad_norm(params, cfg.grad_clip)
                opt.step()
                losses.append(value)
                step += 1
            record = {"epoch": epoch, "step": step, "loss": float(np.mean(losses)) if losses else None,
                      "lr": opt.state.learning_rate}
            last = epoch == epochs - 1
            if val is not None and ((epoch + 1) % eval_every == 0 or last):
                score = evaluate(model, val, "miou").miou
                record["val_miou"] = score
                if score is not None and score > best:
                    best = score
                    result.best_miou = score
                    if checkpoint_path:
                        save_model(checkpoint_path, model)
            result.history.append(record)
            if log_file:
                log_file.write(json.dumps(record, sort_keys=True) + "\n")
                log_file.flush()
            if losses:
                result.final_loss = losses[-1]
    finally:
        if log_file:
            log_file.close()
    result.steps = step
    if checkpoint_path and (val is None or best < 0):
        save_model(checkpoint_path, model)
    return result


def _abort(model: PriorLane, value: float, step: int, log_file, detail: str = "") -> None:
    norms = _grad_norms(model)
    dump = {"event": "non-finite loss", "loss": repr(value), "step": step, "grad_norms": norms}
    if detail:
        dump["detail"] = detail
    line = json.dumps(dump, sort_keys=True)
    if log_file:
        log_file.write(line + "\n")
        log_file.flush()
    print(line, file=sys.stderr)
    raise NumericError(f"loss became {value} at step {step}; gradient norms dumped")


# -- evaluation -----------------------------------------------------------------------

def predict(model: PriorLane, ds: Dataset, batch: int = 10):
    """Yield (indices, SegOutput) over the dataset without recording a graph."""
    with no_grad():
        for i in range(0, len(ds), batch):
            idx = list(range(i, min(i + batch, len(ds))))
            images, _, _, priors = ds.batch(idx)
            yield idx, model(images, priors if model.cfg.uses_prior else None)


def evaluate(model: PriorLane, ds: Dataset, protocol: str = "miou", batch: int = 10,
             threshold: float = 0.5) -> EvalReport:
    if protocol not in PROTOCOLS:
        raise ConfigError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    check_compatible(model.cfg, ds)
    names = ZJLAB_CLASSES if ds.num_classes == len(ZJLAB_CLASSES) and ds.max_lanes + 1 != ds.num_classes else None
    if protocol != "miou" and ds.num_classes != ds.max_lanes + 1:
        raise ConfigError(f"protocol {protocol} needs per-lane instance labels")
    h, w = model.cfg.image_height, model.cfg.image_width
    report = EvalReport(class_names=names)
    for idx, out in predict(model, ds, batch):
        if protocol == "miou":
            pred = out.upsampled(h, w).data.argmax(axis=1)
            for j, i in enumerate(idx):
                report = report + miou(pred[j], ds[i].label, ds.num_classes, names)
            continue
        lanes = decode_lanes(out, threshold, size=(h, w))
        for j, i in enumerate(idx):
            gts = lanes_from_label(ds[i].label, ds.max_lanes)
            if protocol == "culane-f1":
                report = report + culane_f1(lanes[j], gts, h, w)
            else:
                report = report + tusimple_accuracy(lanes[j], gts)
    return report


# -- checkpoints ----------------------------------------------------------------------

def save_model(path, model: PriorLane) -> None:
    state = model.state_dict()
    raw = json.dumps(model.cfg.to_dict(), sort_keys=True).encode("utf-8")
    state[CONFIG_KEY] = np.frombuffer(raw, dtype=np.uint8).astype(np.float64)
    save_checkpoint(path, state)


def load_model(path) -> PriorLane:
    state = load_checkpoint(path)
    if CONFIG_KEY not in state:
        raise DataError(f"{path}: checkpoint carries no model configuration")
    raw = state.pop(CONFIG_KEY).astype(np.uint8).tobytes()
    try:
        cfg = ModelConfig(**json.loads(raw.decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise DataError(f"{path}: unreadable model configuration") from exc
    model = PriorLane(cfg, 0)
    model.load_state_dict(state)
    return model

