"""Training objectives: cross-entropy, temperature-scaled contrastive loss,
and their weighted combination.

The contrastive term works on cosine similarities of L2-normalized embeddings,
scaled by 1/τ, and is evaluated entirely in log-space: with τ = 0.05 the raw
similarities reach exp(20), so ratios are formed as log-sum-exp differences,
never as quotients of exponentials.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from . import model as _model
from .autodiff import Tensor
from .errors import ContractError, DegenerateEmbeddingError, ShapeError

_NORM_FLOOR = 1e-12


@dataclass(frozen=True)
class LabeledBatch:
    """Inputs with class labels and source-domain tags, equal length each."""

    inputs: np.ndarray
    labels: np.ndarray
    domains: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "inputs",
                           np.asarray(self.inputs, dtype=np.float64))
        object.__setattr__(self, "labels",
                           np.asarray(self.labels, dtype=np.intp))
        object.__setattr__(self, "domains",
                           np.asarray(self.domains, dtype=np.intp))
        if self.inputs.ndim != 2:
            raise ShapeError(f"batch inputs must be 2-d, got {self.inputs.shape}")
        n = self.inputs.shape[0]
        if self.labels.shape != (n,) or self.domains.shape != (n,):
            raise ContractError(
                f"batch fields disagree: {n} inputs, {self.labels.shape} labels, "
                f"{self.domains.shape} domains")
        if n and (self.labels.min() < 0 or self.domains.min() < 0):
            raise ContractError("labels and domain ids must be non-negative")

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _lift2d(x, what: str) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.data.ndim != 2:
        raise ShapeError(f"{what} must be 2-d, got {t.shape}")
    return t


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-softmax probability of the true class."""
    lg = _lift2d(logits, "logits")
    labels = np.asarray(labels, dtype=np.intp)
    n, c = lg.shape
    if labels.shape != (n,):
        raise ContractError(f"{n} logit rows but labels shaped {labels.shape}")
    if n == 0:
        raise ContractError("cross_entropy on an empty batch")
    if labels.min() < 0 or labels.max() >= c:
        raise ContractError(f"label outside [0, {c})")
    lse = ad.logsumexp(lg, axis=1)
    picked = ad.take(lg, np.arange(n), labels)
    return ad.tmean(lse - picked)


def _vector(x, what: str) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if t.data.ndim != 1:
        raise ShapeError(f"{what} must be a vector, got {t.shape}")
    return t


def cosine_similarity(p, q) -> Tensor:
    p = _vector(p, "p")
    q = _vector(q, "q")
    if p.shape != q.shape:
        raise ShapeError(f"vector shapes differ: {p.shape} vs {q.shape}")
    np_val = float(np.linalg.norm(p.data))
    nq_val = float(np.linalg.norm(q.data))
    if np_val < _NORM_FLOOR or nq_val < _NORM_FLOOR:
        raise DegenerateEmbeddingError(
            f"embedding norm below {_NORM_FLOOR:g} (got {min(np_val, nq_val):g})")
    dot = ad.tsum(p * q)
    return dot / (ad.sqrt(ad.tsum(p * p)) * ad.sqrt(ad.tsum(q * q)))


def log_pair_similarity(p, q, tau: float) -> Tensor:
    """log S = cosine/τ; the value to use whenever S itself would overflow."""
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    return cosine_similarity(p, q) * (1.0 / tau)


def pair_similarity(p, q, tau: float) -> Tensor:
    return ad.exp(log_pair_similarity(p, q, tau))


def _normalize_rows(e: Tensor) -> Tensor:
    norms = np.linalg.norm(e.data, axis=1)
    if norms.size and norms.min() < _NORM_FLOOR:
        raise DegenerateEmbeddingError(
            f"embedding row with norm below {_NORM_FLOOR:g}")
    sq = ad.tsum(e * e, axis=1, keepdims=True)
    return e / ad.sqrt(sq)


def contrastive_batch_loss(embeddings, labels, tau: float,
                           literal_denominator: bool = False) -> Tensor:
    """Mean over ordered same-class pairs (a, b) of
    −log[ S(a,b) / (S(a,b) + Σ_{l: class(l) ≠ class(a)} S(a,l)) ].

    `literal_denominator` switches to the variant whose denominator sums
    the positive similarity once per different-class sample; pairs without any
    different-class sample are skipped there (the ratio is undefined).  A batch
    with no positive pairs contributes 0.
    """
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    e = _lift2d(embeddings, "embeddings")
    n = e.shape[0]
    if n < 2:
        raise ContractError(f"contrastive loss needs a batch of >= 2, got {n}")
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (n,):
        raise ContractError(f"{n} embeddings but labels shaped {labels.shape}")

    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    anchors, positives = np.nonzero(same)
    if anchors.size == 0:
        return Tensor(0.0)

    en = _normalize_rows(e)
    sim = (en @ en.T) * (1.0 / tau)
    negatives = labels[anchors][:, None] != labels[None, :]

    if literal_denominator:
        n_neg = negatives.sum(axis=1)
        keep = n_neg > 0
        if not keep.any():
            return Tensor(0.0)
        s_ab = ad.take(sim, anchors[keep], positives[keep])
        # denominator = n_neg · S(a,b); in log-space the pair similarity
        # cancels, leaving log n_neg, but the graph keeps both terms so the
        # (zero) gradient flows through the same nodes as the default path
        return ad.tmean(Tensor(np.log(n_neg[keep])) + s_ab - s_ab)

    mask = negatives.copy()
    mask[np.arange(anchors.size), positives] = True
    denom = ad.logsumexp(ad.take_rows(sim, anchors), mask=mask)
    s_ab = ad.take(sim, anchors, positives)
    return ad.tmean(denom - s_ab)


def train_loss(batch: LabeledBatch, params, lam: float, tau: float,
               literal_denominator: bool = False) -> Tensor:
    """Combined objective: cross-entropy plus λ times the contrastive term."""
    if lam < 0:
        raise ContractError(f"contrastive weight must be >= 0, got {lam}")
    tensors = params if isinstance(params, Mapping) \
        else _model.param_tensors(params, requires_grad=True)
    emb, lg = _model.forward(batch.inputs, tensors)
    ce = cross_entropy(lg, batch.labels)
    if lam == 0.0:
        return ce
    ct = contrastive_batch_loss(emb, batch.labels, tau, literal_denominator)
    return ce + lam * ct
