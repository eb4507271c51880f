"""Evaluation: confusion-matrix metrics, the held-out-source protocol, and
the four-variant ablation table with its report artifacts.

Per-run seeds are derived from the base seed and the held-out domain name
only, never the loss variant, so the four variants of one ablation cell see
identical batch schedules and differ purely in the active loss terms.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from .config import LOSS_VARIANTS, TrainConfig
from .data import DomainDataset
from .errors import ContractError, DataError
from .model import ModelParams, predict
from .trainer import train

REPORT_SCHEMA = {
    "type": "object",
    "required": ["domain", "variant", "confusion", "per_class", "macro", "n"],
    "properties": {
        "domain": {"type": "string"},
        "variant": {"type": "string"},
        "confusion": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        },
        "per_class": {
            "type": "object",
            "additionalProperties": {
                "type": "object",
                "required": ["precision", "recall", "f1"],
                "properties": {
                    "precision": {"type": "number", "minimum": 0, "maximum": 1},
                    "recall": {"type": "number", "minimum": 0, "maximum": 1},
                    "f1": {"type": "number", "minimum": 0, "maximum": 1},
                },
            },
        },
        "macro": {
            "type": "object",
            "required": ["precision", "recall", "f1"],
        },
        "n": {"type": "integer", "minimum": 0},
    },
}


@dataclass(frozen=True)
class MetricsReport:
    domain: str
    variant: str
    confusion: np.ndarray            # rows = true class, cols = predicted
    per_class: dict[str, dict[str, float]]
    macro: dict[str, float]
    n: int


def confusion_matrix(true, pred, num_classes: int) -> np.ndarray:
    true = np.asarray(true, dtype=np.intp)
    pred = np.asarray(pred, dtype=np.intp)
    if true.shape != pred.shape:
        raise ContractError(f"{true.shape} true labels vs {pred.shape} predictions")
    if true.size and (min(true.min(), pred.min()) < 0
                      or max(true.max(), pred.max()) >= num_classes):
        raise ContractError(f"label outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def _safe_div(a: float, b: float) -> float:
    return a / b if b else 0.0


def metrics_from_confusion(cm: np.ndarray, class_names: Sequence[str],
                           weighted: bool = False
                           ) -> tuple[dict[str, dict[str, float]], dict[str, float]]:
    """Per-class precision/recall/F1 and their (macro or support-weighted)
    average; every 0/0 resolves to 0."""
    cm = np.asarray(cm)
    c = len(class_names)
    if cm.shape != (c, c):
        raise ContractError(f"confusion {cm.shape} vs {c} class names")
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    per_class = {}
    triples = []
    for k, name in enumerate(class_names):
        tp = float(cm[k, k])
        p = _safe_div(tp, float(predicted[k]))
        r = _safe_div(tp, float(support[k]))
        f1 = _safe_div(2.0 * p * r, p + r)
        per_class[name] = {"precision": p, "recall": r, "f1": f1}
        triples.append((p, r, f1))
    arr = np.array(triples)
    if weighted:
        w = support / support.sum() if support.sum() else np.full(c, 1.0 / c)
        avg = arr.T @ w
    else:
        avg = arr.mean(axis=0)
    macro = {"precision": float(avg[0]), "recall": float(avg[1]),
             "f1": float(avg[2])}
    return per_class, macro


def evaluate(params: ModelParams, dataset: DomainDataset,
             weighted: bool = False, variant: str = "") -> MetricsReport:
    if params.in_dim != dataset.dim:
        raise ContractError(
            f"model expects dim {params.in_dim} but dataset {dataset.name!r} "
            f"has dim {dataset.dim}")
    if params.num_classes != len(dataset.class_names):
        raise ContractError(
            f"model has {params.num_classes} classes but dataset names "
            f"{len(dataset.class_names)}")
    pred = predict(dataset.features, params)
    cm = confusion_matrix(dataset.labels, pred, params.num_classes)
    per_class, macro = metrics_from_confusion(cm, dataset.class_names, weighted)
    return MetricsReport(domain=dataset.name, variant=variant, confusion=cm,
                         per_class=per_class, macro=macro, n=len(dataset))


# -- report serialization -------------------------------------------------

def report_to_json(report: MetricsReport) -> str:
    payload = {
        "domain": report.domain,
        "variant": report.variant,
        "confusion": report.confusion.tolist(),
        "per_class": report.per_class,
        "macro": report.macro,
        "n": report.n,
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def report_from_json(text: str) -> MetricsReport:
    try:
        payload = json.loads(text)
        return MetricsReport(domain=payload["domain"], variant=payload["variant"],
                             confusion=np.asarray(payload["confusion"],
                                                  dtype=np.int64),
                             per_class=payload["per_class"],
                             macro=payload["macro"], n=payload["n"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"malformed report: {exc}")


# -- held-out protocol ----------------------------------------------------

def run_seed(base_seed: int, domain: str) -> int:
    """Per-cell seed: variant-independent so ablation columns pair up."""
    return (int(base_seed) ^ zlib.crc32(domain.encode())) & 0x7FFFFFFF


def run_cell(datasets: Sequence[DomainDataset], config: TrainConfig,
             holdout: str) -> MetricsReport:
    """Train on every source but `holdout`, then evaluate on it."""
    by_name = {ds.name: ds for ds in datasets}
    if holdout not in by_name:
        raise ContractError(f"unknown holdout {holdout!r}; "
                            f"sources: {[ds.name for ds in datasets]}")
    held = by_name[holdout]
    train_sets = [ds for ds in datasets if ds.name != holdout]
    cfg = replace(config, seed=run_seed(config.seed, holdout))
    params, record = train(train_sets, cfg)
    if record.updates_by_source.get(holdout, 0) != 0:
        raise ContractError(f"holdout {holdout!r} received parameter updates")
    return evaluate(params, held, weighted=config.weighted,
                    variant=config.loss_variant)


def leave_one_out(datasets: Sequence[DomainDataset],
                  config: TrainConfig) -> dict[str, MetricsReport]:
    if len(datasets) < 2:
        raise ContractError("leave-one-out needs at least 2 sources")
    return {ds.name: run_cell(datasets, config, ds.name) for ds in datasets}


def ablate(datasets: Sequence[DomainDataset], config: TrainConfig
           ) -> dict[tuple[str, str], MetricsReport]:
    """variant × domain table; all cells share the per-domain seeds."""
    table = {}
    for variant in LOSS_VARIANTS:
        cfg = replace(config, loss_variant=variant)
        for domain, report in leave_one_out(datasets, cfg).items():
            table[(variant, domain)] = report
    return table


# -- summary CSV ----------------------------------------------------------

def summary_csv(tables: Sequence[Mapping[tuple[str, str], MetricsReport]]) -> str:
    """Seed-averaged (variant, domain) rows plus per-variant average rows.

    With one table the CSV carries plain means; with several, std columns over
    the seeds are appended.
    """
    if not tables:
        raise ContractError("summary needs at least one result table")
    keys = sorted({k for t in tables for k in t},
                  key=lambda k: (LOSS_VARIANTS.index(k[0]), k[1]))
    for t in tables:
        if set(t) != set(keys):
            raise ContractError("result tables disagree on their cells")
    multi = len(tables) > 1
    header = "variant,domain,precision,recall,f1"
    if multi:
        header += ",precision_std,recall_std,f1_std"
    lines = [header]

    def fmt(values: np.ndarray) -> str:
        cell = ",".join(repr(round(float(v), 10)) for v in values.mean(axis=0))
        if multi:
            cell += "," + ",".join(repr(round(float(v), 10))
                                   for v in values.std(axis=0))
        return cell

    for variant in LOSS_VARIANTS:
        cells = [k for k in keys if k[0] == variant]
        if not cells:
            continue
        collected = []
        for _, domain in cells:
            values = np.array([[t[(variant, domain)].macro[m]
                                for m in ("precision", "recall", "f1")]
                               for t in tables])
            lines.append(f"{variant},{domain},{fmt(values)}")
            collected.append(values)
        per_seed_mean = np.stack(collected).mean(axis=0)   # (seeds, 3)
        lines.append(f"{variant},average,{fmt(per_seed_mean)}")
    return "\n".join(lines) + "\n"
