"""Leave-one-source-out meta training.

One round: hold a source out as the test side, refresh differential statistics
on the remaining sources, run inner Adam steps on interleaved training batches
(cross-entropy plus the optional contrastive term), accumulate the scaled
test-side gradient of cross-entropy plus the optional generalization penalty
into an accumulator chi, and finally apply `params ← params − meta_lr · chi`
once.  Epochs cycle every source through the test slot.  `erm_train` is the
pooled plain-supervised baseline; given an explicit batch schedule it is
bit-identical to the collapsed meta loop (meta_lr = gamma = lambda = 0), which
tests pin.

Randomness discipline: one generator drives every batch shuffle in a fixed
consumption order; everything else (pair caps, statistics refreshes) uses
seeds derived by hashing the run seed with the loop coordinates, so optional
code paths never shift the batch schedule.
"""

from __future__ import annotations

import itertools
import logging
import time
import zlib
from dataclasses import dataclass, field
from math import ceil
from typing import Iterable, Sequence

import numpy as np

from . import dg as _dg
from . import model as _model
from .config import TrainConfig
from .data import DomainDataset, batch_iterator
from .errors import ConfigError, ContractError, NumericError
from .losses import LabeledBatch, cross_entropy, train_loss
from .model import ModelParams

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8

_BATCH_STREAM_SALT = 0xB47C4


def derived_seed(*parts) -> int:
    """Stable, order-sensitive seed from loop coordinates."""
    blob = "/".join(repr(p) for p in parts).encode()
    return zlib.crc32(blob)


# -- Adam -----------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int


def adam_init(params: ModelParams) -> AdamState:
    zeros = {name: np.zeros_like(arr) for name, arr in params.named_arrays()}
    return AdamState(m=zeros, v={k: z.copy() for k, z in zeros.items()}, t=0)


def adam_step(params: ModelParams, grads: dict[str, np.ndarray],
              state: AdamState, lr: float) -> tuple[ModelParams, AdamState]:
    t = state.t + 1
    new_arrays, new_m, new_v = {}, {}, {}
    for name, arr in params.named_arrays():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(arr)
        elif not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        m = BETA1 * state.m[name] + (1.0 - BETA1) * g
        v = BETA2 * state.v[name] + (1.0 - BETA2) * g * g
        m_hat = m / (1.0 - BETA1 ** t)
        v_hat = v / (1.0 - BETA2 ** t)
        new_arrays[name] = arr - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        new_m[name], new_v[name] = m, v
    return ModelParams.from_named(new_arrays), AdamState(new_m, new_v, t)


def _grad_map(loss, tensors) -> dict[str, np.ndarray]:
    loss.backward()
    return {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
            for name, t in tensors.items()}


# -- run record -----------------------------------------------------------

@dataclass(frozen=True)
class RoundRow:
    epoch: int
    held_out_source: str
    mean_l_tr: float
    mean_l_ce_te: float
    mean_l_dg_te: float
    wall_ms: float


@dataclass
class RunRecord:
    rounds: list[RoundRow] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    updates_by_source: dict[str, int] = field(default_factory=dict)
    schedule: list[LabeledBatch] | None = None
    best_epoch: int | None = None


CSV_HEADER = "epoch,held_out_source,mean_l_tr,mean_l_ce_te,mean_l_dg_te,wall_ms"


def record_to_csv(record: RunRecord) -> str:
    lines = [CSV_HEADER]
    for r in record.rounds:
        lines.append(f"{r.epoch},{r.held_out_source},{r.mean_l_tr!r},"
                     f"{r.mean_l_ce_te!r},{r.mean_l_dg_te!r},{r.wall_ms:.1f}")
    return "\n".join(lines) + "\n"


# -- single steps ---------------------------------------------------------

def inner_train_step(batch: LabeledBatch, params: ModelParams,
                     config: TrainConfig,
                     state: AdamState) -> tuple[ModelParams, AdamState, float]:
    """One Adam step on the training objective; returns the loss value."""
    lam = config.lam if config.contrastive_on else 0.0
    tensors = _model.param_tensors(params)
    loss = train_loss(batch, tensors, lam, config.tau,
                      config.literal_denominator)
    value = loss.item()
    grads = _grad_map(loss, tensors)
    new_params, new_state = adam_step(params, grads, state, config.inner_lr)
    return new_params, new_state, value


def _te_loss_graph(batch: LabeledBatch, stats, params_or_tensors,
                   config: TrainConfig, pair_seed: int):
    """Test-side objective pieces at the current parameters."""
    tensors = params_or_tensors if isinstance(params_or_tensors, dict) \
        else _model.param_tensors(params_or_tensors)
    _, lg = _model.forward(batch.inputs, tensors)
    ce = cross_entropy(lg, batch.labels)
    used: list[int] = []
    dg_term = None
    if config.dg_on:
        if stats is None:
            raise ContractError("generalization term requested without statistics")
        dg_term, used = _dg.dg_loss(batch, tensors, stats,
                                    config.max_pairs_per_class, pair_seed,
                                    config.literal_metric)
    return tensors, ce, dg_term, used


def meta_test_step(batch: LabeledBatch, stats, params: ModelParams,
                   config: TrainConfig, pair_seed: int
                   ) -> tuple[dict[str, np.ndarray], float, float, list[int]]:
    """gamma-scaled gradient of the test-side objective; no parameter mutation."""
    tensors, ce, dg_term, used = _te_loss_graph(batch, stats, params, config,
                                                pair_seed)
    total = ce if dg_term is None else ce + dg_term
    ce_val = ce.item()
    dg_val = 0.0 if dg_term is None else dg_term.item()
    grads = _grad_map(total, tensors)
    gmap = {name: config.gamma * g for name, g in grads.items()}
    return gmap, ce_val, dg_val, used


def _te_loss_values(batch: LabeledBatch, stats, params: ModelParams,
                    config: TrainConfig, pair_seed: int) -> tuple[float, float, list[int]]:
    """Forward-only test-side loss values, for the record when gamma is 0."""
    tensors = _model.param_tensors(params, requires_grad=False)
    _, ce, dg_term, used = _te_loss_graph(batch, stats, tensors, config, pair_seed)
    return ce.item(), (0.0 if dg_term is None else dg_term.item()), used


# -- statistics refresh ---------------------------------------------------

def _refresh_stats(train_sets: Sequence[DomainDataset], params: ModelParams,
                   config: TrainConfig, seed: int) -> tuple[_dg.ClassStats, list[int]]:
    features = np.vstack([ds.features for ds in train_sets])
    labels = np.concatenate([ds.labels for ds in train_sets])
    emb = _model.embed_array(features, params)
    return _dg.compute_stats(emb, labels, config.max_pairs_per_class, seed,
                             config.epsilon)


# -- the meta round -------------------------------------------------------

def _check_finite(value: float, what: str, step: int) -> None:
    if not np.isfinite(value):
        raise NumericError(f"non-finite {what} at step {step}")


def meta_round(d_test: DomainDataset, d_train: Sequence[DomainDataset],
               params: ModelParams, config: TrainConfig,
               rng: np.random.Generator, *, adam: AdamState | None = None,
               epoch: int = 0, round_idx: int = 0,
               test_domain_id: int = 0,
               train_domain_ids: Sequence[int] | None = None,
               record: RunRecord | None = None,
               step_base: int = 0,
               ) -> tuple[ModelParams, AdamState, RoundRow, int]:
    """One held-out-source round; returns updated params, optimizer state,
    the record row, and the advanced global step counter."""
    if len(d_test) == 0:
        raise ConfigError("test source for the round is empty")
    if not d_train:
        raise ConfigError("round needs at least one training source")
    if d_test.name in {ds.name for ds in d_train}:
        raise ContractError(f"{d_test.name!r} appears on both sides of the round")
    adam = adam_init(params) if adam is None else adam
    record = RunRecord() if record is None else record
    train_ids = list(range(1, len(d_train) + 1)) if train_domain_ids is None \
        else list(train_domain_ids)
    names = {i: ds.name for i, ds in zip(train_ids, d_train)}
    t0 = time.perf_counter()
    step = step_base

    te_batches = batch_iterator(d_test, config.batch_size, rng,
                                domain_ids=[test_domain_id])
    tr_batches = batch_iterator(list(d_train), config.batch_size, rng,
                                interleave=True, domain_ids=train_ids)
    # default budget: one interleaved pass over d_train per round
    inner_k = config.inner_batches or ceil(len(tr_batches) / len(te_batches))
    tr_stream = itertools.cycle(tr_batches)

    stats = None
    if config.dg_on and config.stats_refresh == "per_round":
        stats, skipped = _refresh_stats(d_train, params, config,
                                        derived_seed(config.seed, "stats",
                                                     epoch, round_idx))
        if skipped:
            record.warnings.append(
                f"epoch {epoch} round {round_idx}: classes {skipped} lack pairs "
                f"in the training statistics")

    chi = {name: np.zeros_like(arr) for name, arr in params.named_arrays()}
    l_tr, l_ce_te, l_dg_te = [], [], []
    for b, te_batch in enumerate(te_batches):
        if config.dg_on and config.stats_refresh == "per_test_batch":
            stats, _ = _refresh_stats(d_train, params, config,
                                      derived_seed(config.seed, "stats",
                                                   epoch, round_idx, b))
        for _ in range(inner_k):
            tr_batch = next(tr_stream)
            if record.schedule is not None:
                record.schedule.append(tr_batch)
            params, adam, value = inner_train_step(tr_batch, params, config, adam)
            _check_finite(value, "training loss", step)
            log.debug("STEP %d epoch=%d round=%d loss=%.17g",
                      step, epoch, round_idx, value)
            l_tr.append(value)
            for dom in np.unique(tr_batch.domains):
                src = names[int(dom)]
                record.updates_by_source[src] = \
                    record.updates_by_source.get(src, 0) + 1
            step += 1

        pair_seed = derived_seed(config.seed, "tepair", epoch, round_idx, b)
        if config.gamma != 0.0:
            gmap, ce_val, dg_val, used = meta_test_step(te_batch, stats, params,
                                                        config, pair_seed)
            for name in chi:
                chi[name] += gmap[name]
        else:
            ce_val, dg_val, used = _te_loss_values(te_batch, stats, params,
                                                   config, pair_seed)
        if config.dg_on and not used:
            record.warnings.append(
                f"epoch {epoch} round {round_idx} test batch {b}: "
                f"no usable differential pairs")
        _check_finite(ce_val, "test cross-entropy", step)
        _check_finite(dg_val, "generalization penalty", step)
        l_ce_te.append(ce_val)
        l_dg_te.append(dg_val)
        step += 1

    if config.meta_lr != 0.0 and config.gamma != 0.0:
        params = ModelParams.from_named(
            {name: arr - config.meta_lr * chi[name]
             for name, arr in params.named_arrays()})
        record.updates_by_source[d_test.name] = \
            record.updates_by_source.get(d_test.name, 0) + 1

    row = RoundRow(epoch=epoch, held_out_source=d_test.name,
                   mean_l_tr=float(np.mean(l_tr)),
                   mean_l_ce_te=float(np.mean(l_ce_te)),
                   mean_l_dg_te=float(np.mean(l_dg_te)),
                   wall_ms=(time.perf_counter() - t0) * 1000.0)
    record.rounds.append(row)
    log.info("ROUND epoch=%d held_out=%s l_tr=%.6g l_ce_te=%.6g l_dg_te=%.6g",
             epoch, d_test.name, row.mean_l_tr, row.mean_l_ce_te,
             row.mean_l_dg_te)
    return params, adam, row, step


def _check_sources(datasets: Sequence[DomainDataset], minimum: int) -> None:
    if len(datasets) < minimum:
        raise ContractError(f"need at least {minimum} sources, got {len(datasets)}")
    dims = {ds.dim for ds in datasets}
    if len(dims) != 1:
        raise ContractError(f"sources disagree on feature dim: {sorted(dims)}")
    classes = {ds.class_names for ds in datasets}
    if len(classes) != 1:
        raise ContractError("sources disagree on class names")
    names = [ds.name for ds in datasets]
    if len(set(names)) != len(names):
        raise ContractError(f"duplicate source names: {names}")


def train(datasets: Sequence[DomainDataset], config: TrainConfig,
          collect_schedule: bool = False) -> tuple[ModelParams, RunRecord]:
    """Full multi-epoch run cycling every source through the test slot."""
    config.validate()
    _check_sources(datasets, minimum=2)
    n_classes = len(datasets[0].class_names)
    params = _model.params_for(config, datasets[0].dim, n_classes)
    adam = adam_init(params)
    rng = np.random.default_rng([config.seed, _BATCH_STREAM_SALT])
    record = RunRecord(updates_by_source={ds.name: 0 for ds in datasets},
                       schedule=[] if collect_schedule else None)
    best_f1, best_params = -1.0, None
    step = 0
    for epoch in range(config.epochs):
        for r, d_test in enumerate(datasets):
            d_train = [ds for i, ds in enumerate(datasets) if i != r]
            train_ids = [i for i in range(len(datasets)) if i != r]
            params, adam, _, step = meta_round(
                d_test, d_train, params, config, rng, adam=adam, epoch=epoch,
                round_idx=r, test_domain_id=r, train_domain_ids=train_ids,
                record=record, step_base=step)
        if config.checkpoint_best:
            from .metrics import evaluate
            f1 = float(np.mean([evaluate(params, ds).macro["f1"]
                                for ds in datasets]))
            if f1 > best_f1:
                best_f1, best_params, record.best_epoch = f1, params, epoch
    if config.checkpoint_best and best_params is not None:
        return best_params, record
    return params, record


def erm_train(datasets: Sequence[DomainDataset], config: TrainConfig,
              schedule: Iterable[LabeledBatch] | None = None) -> ModelParams:
    """Plain pooled supervised baseline: Adam on cross-entropy only.

    With an explicit `schedule` the given batches are consumed in order (one
    Adam step each) instead of the internal pooled shuffle; the collapse
    property ties this to the meta loop with all meta terms zeroed.
    """
    config.validate()
    _check_sources(datasets, minimum=1)
    n_classes = len(datasets[0].class_names)
    params = _model.params_for(config, datasets[0].dim, n_classes)
    adam = adam_init(params)
    ce_only = config.with_overrides({"train.loss_variant": "ce"})
    step = 0
    if schedule is not None:
        for batch in schedule:
            params, adam, value = inner_train_step(batch, params, ce_only, adam)
            _check_finite(value, "training loss", step)
            step += 1
        return params
    rng = np.random.default_rng([config.seed, _BATCH_STREAM_SALT])
    for _ in range(config.epochs):
        for batch in batch_iterator(list(datasets), config.batch_size, rng):
            params, adam, value = inner_train_step(batch, params, ce_only, adam)
            _check_finite(value, "training loss", step)
            log.debug("STEP %d loss=%.17g", step, value)
            step += 1
    return params
