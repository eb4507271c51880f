"""Shared oracles: central finite differences and small pure-Python recomputations."""

from __future__ import annotations

import math

import numpy as np

from roadgen.autodiff import Tensor


def numeric_grad(fn, arrays: list[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of a scalar function of several arrays.

    `fn` receives copies of `arrays` and returns a float.  Gradients are
    computed entry by entry, so keep inputs small.
    """
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        flat = g.reshape(-1)
        for i in range(a.size):
            bumped = [x.copy() for x in arrays]
            bumped[k].reshape(-1)[i] += h
            hi = fn(*bumped)
            bumped = [x.copy() for x in arrays]
            bumped[k].reshape(-1)[i] -= h
            lo = fn(*bumped)
            flat[i] = (hi - lo) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm relative error with a floor so zero gradients compare safely."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def check_grads(build, arrays: list[np.ndarray], tol: float = 1e-4,
                h: float = 1e-5) -> float:
    """Compare autodiff gradients of `build` against finite differences.

    `build` maps Tensors (requires_grad=True) to a scalar Tensor.  Returns the
    worst relative error over all inputs and asserts it is below `tol`.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    out.backward()

    def as_float(*arrs):
        return build(*[Tensor(a) for a in arrs]).item()

    fd = numeric_grad(as_float, arrays, h=h)
    # one relative error over the whole gradient vector: parameters whose true
    # gradient is exactly zero otherwise compare FD roundoff noise to nothing
    diff, scale = 0.0, 0.0
    for t, g in zip(tensors, fd):
        got = t.grad if t.grad is not None else np.zeros_like(g)
        diff = max(diff, float(np.abs(got - g).max(initial=0.0)))
        scale = max(scale, float(np.abs(got).max(initial=0.0)),
                    float(np.abs(g).max(initial=0.0)))
    worst = diff / max(scale, 1e-8)
    assert worst < tol, f"gradient mismatch: rel err {worst:.3e} >= {tol:.1e}"
    return worst


def softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy_loops(logits: np.ndarray, labels: np.ndarray) -> float:
    """Plain-loop cross entropy used as an oracle."""
    total = 0.0
    for i in range(logits.shape[0]):
        row = logits[i]
        m = row.max()
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        total += lse - row[labels[i]]
    return total / logits.shape[0]


def contrastive_loops(emb, labels, tau: float, literal: bool = False) -> float:
    """Scalar-arithmetic enumeration of every ordered positive pair."""
    emb = [list(map(float, row)) for row in emb]
    labels = list(map(int, labels))
    n = len(labels)

    def cos(i: int, j: int) -> float:
        dot = sum(a * b for a, b in zip(emb[i], emb[j]))
        ni = math.sqrt(sum(a * a for a in emb[i]))
        nj = math.sqrt(sum(b * b for b in emb[j]))
        return dot / (ni * nj)

    total, count = 0.0, 0
    for a in range(n):
        for b in range(n):
            if a == b or labels[a] != labels[b]:
                continue
            negs = [l for l in range(n) if labels[l] != labels[a]]
            if literal:
                if not negs:
                    continue
                total += math.log(len(negs))
            else:
                s_ab = math.exp(cos(a, b) / tau)
                denom = s_ab + sum(math.exp(cos(a, l) / tau) for l in negs)
                total += -math.log(s_ab / denom)
            count += 1
    return total / count if count else 0.0


def covariance_loops(zs) -> tuple[list[float], list[list[float]]]:
    """Two-pass mean and divide-by-N covariance, element by element."""
    zs = [list(map(float, z)) for z in zs]
    n, d = len(zs), len(zs[0])
    mu = [sum(z[k] for z in zs) / n for k in range(d)]
    cov = [[sum((z[k] - mu[k]) * (z[l] - mu[l]) for z in zs) / n
            for l in range(d)] for k in range(d)]
    return mu, cov


def dg_loops(emb_te, labels_te, stats) -> float:
    """Loop-based generalization penalty: per-class mean distance, then the
    mean over classes present in both the batch (>= 2 samples) and `stats`."""
    emb_te = np.asarray(emb_te, dtype=np.float64)
    labels_te = np.asarray(labels_te)
    class_means = []
    for c in sorted(set(labels_te.tolist())):
        if c not in stats.classes:
            continue
        idx = [i for i, l in enumerate(labels_te) if l == c]
        if len(idx) < 2:
            continue
        entry = stats.classes[c]
        dists = []
        for a in range(len(idx)):
            for b in range(a + 1, len(idx)):
                z = emb_te[idx[a]] - emb_te[idx[b]]
                diff = z - entry.mean
                q = float(diff @ entry.inv_reg @ diff)
                dists.append(math.sqrt(max(q, 0.0)))
        class_means.append(sum(dists) / len(dists))
    return sum(class_means) / len(class_means) if class_means else 0.0
