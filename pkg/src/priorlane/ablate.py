"""Grid sweeps over fusion depth, perception range and variant.

Each cell trains one model per seed and scores it by test mIoU (in points).
The long-form table has one row per cell with a column per seed and a mean.
"""
from __future__ import annotations

import configparser
import csv
import io
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigError, PriorLaneError
from .train import evaluate, load_datasets, train_model

log = logging.getLogger(__name__)

AXES = {
    "l1": ("knowledge_layers", int),
    "l2": ("fusion_layers", int),
    "range": ("perception_range", float),
    "variant": ("variant", str),
}


@dataclass
class SweepSpec:
    axes: dict = field(default_factory=dict)  # axis name -> tuple of values, in sweep order

    def __post_init__(self):
        for name, values in self.axes.items():
            if name not in AXES:
                raise ConfigError(f"unknown sweep axis {name!r}; expected one of {tuple(AXES)}")
            if not values:
                raise ConfigError(f"sweep axis {name!r} has no values")

    def cells(self) -> list[dict]:
        names = list(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.axes[n] for n in names))]

    @classmethod
    def from_ini(cls, text: str) -> "SweepSpec":
        cp = configparser.ConfigParser(interpolation=None)
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed sweep spec: {exc}") from exc
        if not cp.has_section("sweep"):
            raise ConfigError("sweep spec needs a [sweep] section")
        axes = {}
        for key, raw in cp["sweep"].items():
            if key not in AXES:
                raise ConfigError(f"unknown sweep axis {key!r}; expected one of {tuple(AXES)}")
            cast = AXES[key][1]
            try:
                axes[key] = tuple(cast(v) for v in raw.replace(",", " ").split())
            except ValueError as exc:
                raise ConfigError(f"bad value on sweep axis {key}: {raw!r}") from exc
        return cls(axes)

    @classmethod
    def load(cls, path) -> "SweepSpec":
        try:
            return cls.from_ini(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read sweep spec {path}: {exc}") from exc


@dataclass
class SweepResult:
    axes: tuple
    seeds: tuple
    rows: list  # dicts: axis values, status, reason, per-seed scores, mean

    def columns(self) -> list[str]:
        return [*self.axes, "status", *(f"seed_{s}" for s in self.seeds), "mean", "reason"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns())
        for row in self.rows:
            w.writerow([_cell(row.get(c)) for c in self.columns()])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"axes": list(self.axes), "seeds": list(self.seeds), "rows": self.rows},
                          sort_keys=True, indent=1)

    def mean_of(self, **where) -> float | None:
        for row in self.rows:
            if all(row.get(k) == v for k, v in where.items()):
                return row.get("mean")
        return None


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def _cell_config(base: ExperimentConfig, cell: dict) -> ExperimentConfig:
    return base.with_overrides(**{AXES[k][0]: v for k, v in cell.items()})


def run_sweep(base: ExperimentConfig, spec: SweepSpec, out_dir=None, progress=None) -> SweepResult:
    """Train/evaluate every cell for every seed; infeasible cells are skipped."""
    datasets: dict = {}
    rows = []
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    for cell in spec.cells():
        row = dict(cell)
        try:
            cfg = _cell_config(base, cell)
            mcfg = cfg.model_config()
            if base.train_path and "range" in cell and cell["range"] != base.perception_range:
                raise ConfigError("perception range sweeps need synthesised data, not fixed dataset files")
        except (ConfigError, PriorLaneError) as exc:
            rows.append({**row, "status": "skipped", "reason": str(exc), "mean": None})
            continue
        key = (cfg.perception_range, cfg.label_mode, cfg.rot_noise_deg, cfg.trans_noise)
        if key not in datasets:
            datasets[key] = load_datasets(cfg)
        train, test = datasets[key]
        if test is None:
            test = train
        scores = {}
        for seed in cfg.seeds:
            tag = "_".join(f"{k}{v}" for k, v in cell.items()) + f"_seed{seed}"
            log_path = Path(out_dir) / f"{tag}.jsonl" if out_dir else None
            result = train_model(cfg, train, None, seed, log_path=log_path, model_cfg=mcfg)
            score = evaluate(result.model, test, "miou").miou
            scores[f"seed_{seed}"] = None if score is None else 100.0 * score
            if progress:
                progress(cell, seed, scores[f"seed_{seed}"])
        vals = [v for v in scores.values() if v is not None]
        rows.append({**row, **scores, "status": "ok", "reason": "",
                     "mean": float(np.mean(vals)) if vals else None})
    return SweepResult(tuple(spec.axes), tuple(base.seeds), rows)


def write_results(result: SweepResult, out_dir) -> dict:
    from .plotting import plot_sweep

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "results.csv", "json": out / "results.json"}
    paths["csv"].write_text(result.to_csv())
    paths["json"].write_text(result.to_json())
    for axis in result.axes:
        fig = out / f"sweep_{axis}.png"
        if plot_sweep(result, axis, fig):
            paths[f"figure_{axis}"] = fig
    return paths
