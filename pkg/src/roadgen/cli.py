"""Command-line surface.

Five subcommands: `gen-data` and `ingest` produce dataset directories,
`train` runs the meta loop against a held-out source and writes a run
directory, `eval` scores a checkpoint, and `ablate` builds the seeded
variant-by-domain table with resumable per-cell reports.

Exit codes: 0 success, 1 runtime or data failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .config import LOSS_VARIANTS, TrainConfig
from .data import (SyntheticSpec, gen_synthetic, ingest_crops, load_dataset,
                   load_datasets, save_dataset)
from .errors import ConfigError, ContractError, RoadgenError
from .metrics import (evaluate, report_from_json, report_to_json, run_cell,
                      summary_csv)
from .model import load_checkpoint, save_checkpoint
from .trainer import record_to_csv, train

log = logging.getLogger("roadgen")


def _config_from_args(args: argparse.Namespace) -> TrainConfig:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides: dict[str, str] = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    if getattr(args, "loss_variant", None):
        overrides["train.loss_variant"] = args.loss_variant
    if getattr(args, "seed", None) is not None:
        overrides["train.seed"] = str(args.seed)
    if overrides:
        cfg = cfg.with_overrides(overrides)
    cfg.validate()
    return cfg


# -- commands -------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace) -> int:
    spec = SyntheticSpec(num_domains=args.domains, num_classes=args.classes,
                         feature_dim=args.dim, per_class=args.per_class,
                         delta=args.delta, alpha=args.alpha, sigma=args.sigma,
                         seed=args.seed)
    out = Path(args.out)
    for ds in gen_synthetic(spec):
        save_dataset(ds, out / ds.name)
        print(f"wrote {out / ds.name} ({len(ds)} samples)")
    return 0


def cmd_ingest(args: argparse.Namespace) -> int:
    images, annotations = Path(args.images), Path(args.annotations)
    if not images.is_dir():
        raise ConfigError(f"--images {images} is not a directory")
    if not annotations.is_dir():
        raise ConfigError(f"--annotations {annotations} is not a directory")
    ds = ingest_crops(images, annotations, min_area=args.min_area,
                      out_size=args.size, name=args.name)
    save_dataset(ds, args.out)
    print(" ".join([*ds.class_names, "SUM"]))
    print(" ".join(str(int(c)) for c in ds.class_counts()) + f" {len(ds)}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _config_from_args(args)
    datasets = load_datasets(args.data)
    names = [ds.name for ds in datasets]
    if args.holdout not in names:
        raise ConfigError(f"holdout {args.holdout!r} not among sources {names}")
    held = next(ds for ds in datasets if ds.name == args.holdout)
    train_sets = [ds for ds in datasets if ds.name != args.holdout]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "train.log", mode="w")
    handler.setFormatter(logging.Formatter("%(message)s"))
    old_level = log.level
    log.addHandler(handler)
    log.setLevel(logging.DEBUG)
    try:
        params, record = train(train_sets, cfg)
        for warning in record.warnings:
            log.warning("WARN %s", warning)
        for name in names:
            log.info("UPDATES source=%s count=%d",
                     name, record.updates_by_source.get(name, 0))
    finally:
        log.removeHandler(handler)
        handler.close()
        log.setLevel(old_level)
    if record.updates_by_source.get(held.name, 0):
        raise ContractError(f"holdout {held.name!r} received parameter updates")

    report = evaluate(params, held, weighted=cfg.weighted,
                      variant=cfg.loss_variant)
    cfg.save(out / "config.txt")
    save_checkpoint(params, cfg, out / "model.dgck")
    (out / "rounds.csv").write_text(record_to_csv(record))
    (out / "report.json").write_text(report_to_json(report))
    if not args.no_figures:
        from . import figures  # deferred: pulls in matplotlib
        figures.confusion_figure(report, out / "confusion.png")
        figures.curves_figure(record.rounds, out / "curves.png")
    print(f"holdout {held.name}: macro-F1 {report.macro['f1']:.4f}")
    print(f"run directory: {out}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    params, cfg = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    report = evaluate(params, ds, weighted=cfg.weighted,
                      variant=cfg.loss_variant)
    text = report_to_json(report)
    if args.report:
        report_path = Path(args.report)
        report_path.write_text(text)
        if not args.no_figures:
            from . import figures
            figures.confusion_figure(report, report_path.with_suffix(".png"))
        print(f"wrote {report_path}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    if args.seeds < 1:
        raise ConfigError(f"--seeds must be at least 1, got {args.seeds}")
    cfg = _config_from_args(args)
    datasets = load_datasets(args.data)
    out = Path(args.out)
    cells_dir = out / "cells"
    cells_dir.mkdir(parents=True, exist_ok=True)

    tables = []
    for s in range(args.seeds):
        table = {}
        base = replace(cfg, seed=cfg.seed + s)
        for variant in LOSS_VARIANTS:
            vc = replace(base, loss_variant=variant)
            for ds in datasets:
                cell = cells_dir / f"{variant}__{ds.name}__seed{s}.json"
                if cell.is_file():
                    report = report_from_json(cell.read_text())
                else:
                    report = run_cell(datasets, vc, ds.name)
                    cell.write_text(report_to_json(report))
                table[(variant, ds.name)] = report
        tables.append(table)

    csv_text = summary_csv(tables)
    (out / "summary.csv").write_text(csv_text)
    if not args.no_figures:
        from . import figures
        averages = {}
        for variant in LOSS_VARIANTS:
            per_seed = [float(np.mean([t[(variant, ds.name)].macro["f1"]
                                       for ds in datasets])) for t in tables]
            spread = float(np.std(per_seed)) if len(per_seed) > 1 else None
            averages[variant] = (float(np.mean(per_seed)), spread)
        figures.ablation_figure(averages, out / "ablation.png")
    sys.stdout.write(csv_text)
    return 0


# -- wiring ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="roadgen",
        description="Domain-generalized defect classification toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write synthetic dataset directories")
    p.add_argument("--domains", type=int, default=4)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--delta", type=float, default=5.0)
    p.add_argument("--alpha", type=float, default=0.4)
    p.add_argument("--sigma", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("ingest", help="crop annotated boxes into a dataset")
    p.add_argument("--images", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-area", type=int, default=400)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--name", default="ingested")
    p.set_defaults(func=cmd_ingest)

    def add_config_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="dotted-key config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, help="override train.seed")
        p.add_argument("--no-figures", action="store_true",
                       help="skip PNG rendering")

    p = sub.add_parser("train", help="meta-train against a held-out source")
    add_config_flags(p)
    p.add_argument("--loss-variant", choices=LOSS_VARIANTS,
                   help="override train.loss_variant")
    p.add_argument("--data", nargs="+", required=True,
                   metavar="DIR", help="dataset directories")
    p.add_argument("--holdout", required=True,
                   help="source name excluded from training")
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--report", help="report path (default: stdout)")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="variant-by-domain table over seeds")
    add_config_flags(p)
    p.add_argument("--data", nargs="+", required=True, metavar="DIR")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=5,
                   help="independent seeds to average over")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RoadgenError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
