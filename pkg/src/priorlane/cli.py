"""``priorlane`` command line: synth, train, eval, ablate, gradcheck, render.

Exit codes: 0 ok, 1 usage/configuration, 2 data/format, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .errors import ConfigError, PriorLaneError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


# -- recipes ----------------------------------------------------------------------

def load_recipe_file(path):
    """[recipe] section: ``count``, ``first_seed`` and any SceneRecipe field."""
    from .synth import SceneRecipe, recipes_for

    cp = configparser.ConfigParser(interpolation=None)
    try:
        text = Path(path).read_text()
        cp.read_string(text)
    except (OSError, configparser.Error) as exc:
        raise ConfigError(f"cannot read recipe {path}: {exc}") from exc
    if not cp.has_section("recipe"):
        raise ConfigError("recipe file needs a [recipe] section")
    sec = dict(cp["recipe"])
    try:
        count = int(sec.pop("count", "1"))
        first = int(sec.pop("first_seed", "0"))
    except ValueError as exc:
        raise ConfigError(f"bad count/first_seed: {exc}") from exc
    kinds = {f.name: f.default for f in fields(SceneRecipe)}
    kw = {}
    for key, raw in sec.items():
        if key not in kinds:
            raise ConfigError(f"unknown recipe key {key!r}")
        default = kinds[key]
        try:
            if isinstance(default, tuple):
                kw[key] = tuple(type(default[0])(v) for v in raw.replace(",", " ").split())
            elif isinstance(default, bool):
                kw[key] = raw.strip().lower() in ("1", "true", "yes")
            else:
                kw[key] = type(default)(raw.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for recipe key {key}: {raw!r}") from exc
    base = SceneRecipe(**kw)
    base.validate()
    return recipes_for(base, count, first)


# -- commands -------------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import class_histogram, generate_dataset, write_dataset

    recipes = load_recipe_file(args.recipe)
    scenes = generate_dataset(recipes)
    num_classes, max_lanes = recipes[0].num_classes, recipes[0].max_lanes
    write_dataset(scenes, args.out, num_classes, max_lanes)
    hist = class_histogram(scenes, num_classes)
    print(json.dumps({"scenes": len(scenes), "path": str(args.out),
                      "class_histogram": hist.tolist()}, sort_keys=True))
    return EXIT_OK


def _experiment(args):
    from .config import ExperimentConfig

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig().apply_env()
    if getattr(args, "out", None):
        cfg = cfg.with_overrides(out_dir=str(Path(args.out).resolve()))
    return cfg


def cmd_train(args) -> int:
    from .train import load_datasets, train_model

    cfg = _experiment(args)
    seeds = [args.seed] if args.seed is not None else list(cfg.seeds)
    train, test = load_datasets(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())
    summary = []
    for seed in seeds:
        res = train_model(cfg, train, test, seed, log_path=out / f"train_seed{seed}.jsonl",
                          checkpoint_path=out / f"model_seed{seed}.plck")
        summary.append({"seed": seed, "final_loss": res.final_loss, "best_val_miou": res.best_miou,
                        "steps": res.steps, "checkpoint": str(out / f"model_seed{seed}.plck")})
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .synth import read_dataset
    from .train import evaluate, load_model

    model = load_model(args.checkpoint)
    ds = read_dataset(args.dataset)
    report = evaluate(model, ds, args.protocol)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablate import SweepSpec, run_sweep, write_results

    cfg = _experiment(args)
    spec = SweepSpec.load(args.sweep)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def progress(cell, seed, score):
        print(f"cell {cell} seed {seed}: mIoU {score if score is None else round(score, 3)}", file=sys.stderr)

    result = run_sweep(cfg, spec, out_dir=out / "logs" if args.logs else None, progress=progress)
    paths = write_results(result, out)
    print(result.to_csv(), end="")
    print(json.dumps({k: str(v) for k, v in paths.items()}, sort_keys=True), file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .audit import REGISTRY, cases_for, run_case

    if args.list:
        for name, case in REGISTRY.items():
            print(f"{case.scope:7s} {name}")
        return EXIT_OK
    offenders = []
    for case in cases_for(args.scope):
        res = run_case(case)
        ok = res.passed(args.tolerance)
        print(f"{'PASS' if ok else 'FAIL'} {res.scope:7s} {res.name:24s} max_rel_err={res.error:.3e} "
              f"({res.seconds:.2f}s)")
        if not ok:
            offenders.append(res.name)
    if offenders:
        print(f"gradcheck failed (tolerance {args.tolerance:g}): {', '.join(offenders)}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"gradcheck passed: scope={args.scope} tolerance={args.tolerance:g}")
    return EXIT_OK


def cmd_render(args) -> int:
    from .metrics import decode_lanes
    from .plotting import overlay, save_raster
    from .synth import read_dataset
    from .train import check_compatible, load_model, predict

    model = load_model(args.checkpoint)
    ds = read_dataset(args.dataset)
    check_compatible(model.cfg, ds)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"output directory {out} is not writable: {exc}") from exc
    h, w = model.cfg.image_height, model.cfg.image_width
    instance_mode = ds.num_classes == ds.max_lanes + 1
    count = len(ds) if args.limit is None else min(args.limit, len(ds))
    sub = _Subset(ds, count)
    for idx, seg in predict(model, sub):
        masks = seg.upsampled(h, w).data.argmax(axis=1)
        lanes = decode_lanes(seg, args.threshold, size=(h, w)) if instance_mode else [[] for _ in idx]
        for j, i in enumerate(idx):
            save_raster(out / f"sample_{i:05d}.{args.format}", overlay(ds[i].image, masks[j]))
            payload = {"sample": i, "lanes": [lane.to_list() for lane in lanes[j]]}
            (out / f"sample_{i:05d}.json").write_text(json.dumps(payload, sort_keys=True))
    print(json.dumps({"rendered": count, "out": str(out)}))
    return EXIT_OK


class _Subset:
    def __init__(self, ds, n):
        self.ds, self.n = ds, n
        self.num_classes, self.max_lanes = ds.num_classes, ds.max_lanes

    def __len__(self):
        return self.n

    def __getitem__(self, i):
        return self.ds[i]

    def batch(self, idx):
        return self.ds.batch(idx)


# -- entry point -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="priorlane", description="Prior-knowledge lane segmentation at desk scale.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset from a recipe file")
    s.add_argument("recipe")
    s.add_argument("out")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train one model per seed")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("--protocol", choices=("miou", "culane-f1", "tusimple"), default="miou")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="sweep L1, L2, range or variant; CSV + JSON + figures")
    s.add_argument("--config")
    s.add_argument("--sweep", required=True)
    s.add_argument("--out")
    s.add_argument("--logs", action="store_true", help="keep per-run JSON-lines logs")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference audit of analytic gradients")
    s.add_argument("scope", nargs="?", default="ops", choices=("ops", "kea", "fusion", "full"))
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.add_argument("--list", action="store_true", help="list registered cases and exit")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("render", help="write prediction overlays and lane polylines")
    s.add_argument("checkpoint")
    s.add_argument("dataset")
    s.add_argument("out")
    s.add_argument("--format", choices=("png", "ppm"), default="png")
    s.add_argument("--threshold", type=float, default=0.5)
    s.add_argument("--limit", type=int)
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PriorLaneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
