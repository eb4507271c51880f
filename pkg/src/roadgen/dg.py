"""Differential-feature statistics and the generalization penalty.

A differential vector is the difference of two same-class embeddings.  Per
class we summarize their distribution by a mean and covariance (computed once
per refresh, gradient-free, over the training sources) and then penalize the
Mahalanobis distance of held-out-batch differential vectors to that
distribution.  Only the held-out side of the distance carries gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError

from . import autodiff as ad
from . import model as _model
from .autodiff import Tensor
from .errors import ConfigError, ContractError, NumericError, ShapeError
from .losses import LabeledBatch

_Q_TOL = -1e-9


@dataclass(frozen=True)
class ClassEntry:
    mean: np.ndarray         # (d,)
    cov: np.ndarray          # (d, d), divided by N
    inv_reg: np.ndarray      # (cov + εI)⁻¹, symmetrized
    count: int               # number of differential vectors


@dataclass(frozen=True)
class ClassStats:
    classes: dict[int, ClassEntry]
    epsilon: float

    def __contains__(self, c: int) -> bool:
        return c in self.classes


def _pair_indices(labels: np.ndarray, max_pairs_per_class: int,
                  seed: int) -> tuple[dict[int, tuple[np.ndarray, np.ndarray]], list[int]]:
    """Per class: unordered index pairs (i < j), capped by seeded sampling.

    Classes with a single sample are skipped and reported, not an error.
    The per-class generator is seeded from (seed, class id) so one class's cap
    decision never perturbs another's draw.
    """
    if max_pairs_per_class < 1:
        raise ConfigError(f"max_pairs_per_class must be >= 1, got {max_pairs_per_class}")
    labels = np.asarray(labels, dtype=np.intp)
    pairs: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    skipped: list[int] = []
    for c in np.unique(labels):
        idx = np.nonzero(labels == c)[0]
        if idx.size < 2:
            skipped.append(int(c))
            continue
        ii, jj = np.triu_indices(idx.size, k=1)
        if ii.size > max_pairs_per_class:
            rng = np.random.default_rng([seed, int(c)])
            sel = np.sort(rng.choice(ii.size, size=max_pairs_per_class,
                                     replace=False))
            ii, jj = ii[sel], jj[sel]
        pairs[int(c)] = (idx[ii], idx[jj])
    return pairs, skipped


def differential_pairs(embeddings: np.ndarray, labels, max_pairs_per_class: int,
                       seed: int) -> tuple[dict[int, np.ndarray], list[int]]:
    """Per-class differential vectors z = p_i − p_j over same-class pairs."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise ShapeError(f"embeddings must be 2-d, got {emb.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (emb.shape[0],):
        raise ContractError(
            f"{emb.shape[0]} embeddings but labels shaped {labels.shape}")
    index_pairs, skipped = _pair_indices(labels, max_pairs_per_class, seed)
    zs = {c: emb[ii] - emb[jj] for c, (ii, jj) in index_pairs.items()}
    return zs, skipped


def class_stats(pairs: Mapping[int, np.ndarray], epsilon: float) -> ClassStats:
    """Mean, covariance (divide by N), and regularized inverse per class."""
    if epsilon <= 0:
        raise ConfigError(f"dg.epsilon must be positive, got {epsilon}")
    entries: dict[int, ClassEntry] = {}
    for c in sorted(pairs):
        z = np.asarray(pairs[c], dtype=np.float64)
        if z.ndim != 2 or z.shape[0] < 1:
            raise ContractError(f"class {c}: differential set has shape {z.shape}")
        if not np.all(np.isfinite(z)):
            raise NumericError(f"class {c}: non-finite differential vectors")
        n, d = z.shape
        mu = z.mean(axis=0)
        zc = z - mu
        cov = zc.T @ zc / n
        cov = (cov + cov.T) / 2.0
        try:
            factor = cho_factor(cov + epsilon * np.eye(d), lower=True)
            inv = cho_solve(factor, np.eye(d))
        except LinAlgError as exc:
            raise NumericError(f"class {c}: covariance factorization failed: {exc}")
        inv = (inv + inv.T) / 2.0
        entries[int(c)] = ClassEntry(mean=mu, cov=cov, inv_reg=inv, count=n)
    return ClassStats(classes=entries, epsilon=float(epsilon))


def compute_stats(embeddings: np.ndarray, labels, max_pairs_per_class: int,
                  seed: int, epsilon: float) -> tuple[ClassStats, list[int]]:
    zs, skipped = differential_pairs(embeddings, labels, max_pairs_per_class, seed)
    return class_stats(zs, epsilon), skipped


def _quadratic_form(diff: Tensor, metric: np.ndarray) -> Tensor:
    """Row-wise (z−μ)ᵀ M (z−μ); clamps tiny negatives, rejects real ones."""
    q = ad.tsum((diff @ Tensor(metric)) * diff, axis=1)
    low = float(q.data.min(initial=0.0))
    if low < _Q_TOL:
        raise NumericError(f"quadratic form reached {low:g}; metric is not PSD")
    return ad.sqrt(ad.relu(q))


def mahalanobis(z, mean: np.ndarray, inv_reg: np.ndarray) -> Tensor:
    """Distance of one vector to a class distribution, differentiable in z."""
    zt = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
    if zt.data.ndim != 1:
        raise ShapeError(f"z must be a vector, got {zt.shape}")
    d = zt.shape[0]
    mean = np.asarray(mean, dtype=np.float64)
    inv_reg = np.asarray(inv_reg, dtype=np.float64)
    if mean.shape != (d,) or inv_reg.shape != (d, d):
        raise ShapeError(
            f"shape mismatch: z {zt.shape}, mean {mean.shape}, metric {inv_reg.shape}")
    diff = ad.reshape(zt - Tensor(mean), (1, d))
    return ad.reshape(_quadratic_form(diff, inv_reg), ())


def dg_loss(test_batch: LabeledBatch, params, stats: ClassStats,
            max_pairs_per_class: int, seed: int,
            literal_metric: bool = False) -> tuple[Tensor, list[int]]:
    """Mean over classes of the mean Mahalanobis distance of held-out
    differential vectors to the training distribution.

    Returns the loss and the class ids that contributed; an empty list means
    no class had both a batch pair and training statistics (loss 0, callers
    should flag it).  `literal_metric` uses the raw covariance in the
    quadratic form instead of its regularized inverse.
    """
    tensors = params if isinstance(params, Mapping) \
        else _model.param_tensors(params, requires_grad=True)
    emb = _model.embed(test_batch.inputs, tensors)
    index_pairs, _ = _pair_indices(test_batch.labels, max_pairs_per_class, seed)

    terms: list[Tensor] = []
    used: list[int] = []
    for c in sorted(index_pairs):
        if c not in stats.classes:
            continue
        entry = stats.classes[c]
        ii, jj = index_pairs[c]
        z = ad.take_rows(emb, ii) - ad.take_rows(emb, jj)
        diff = z - Tensor(entry.mean)
        metric = entry.cov if literal_metric else entry.inv_reg
        dists = _quadratic_form(diff, metric)
        terms.append(ad.tmean(dists))
        used.append(c)
    if not terms:
        return Tensor(0.0), []
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms)), used
