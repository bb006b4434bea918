"""k-means pseudo labels and clustering-quality diagnostics."""
import csv
from dataclasses import dataclass

import numpy as np

from .numerics import make_rng


@dataclass
class ClusterAssignment:
    ids: np.ndarray
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float

    def as_dict(self):
        return dict(zip(self.ids.tolist(), self.labels.tolist()))


def _sq_dists(x, c):
    d = (x * x).sum(1)[:, None] - 2 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_pp_init(x, k, rng):
    n = len(x)
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = _sq_dists(x, centers[:1])[:, 0]
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, n - 1)
        centers[j] = x[idx]
        d2 = np.minimum(d2, _sq_dists(x, centers[j:j + 1])[:, 0])
    return centers


def lloyd(x, centers, max_iters=300, tol=1e-6, history=None):
    """Lloyd iterations from given centers; returns (labels, centers, inertia).

    Empty clusters are re-seeded at the point farthest from its centroid.
    Inertia never increases between iterations (asserted).
    """
    centers = centers.copy()
    k = len(centers)
    prev = np.inf
    for _ in range(max_iters):
        d = _sq_dists(x, centers)
        labels = d.argmin(axis=1)
        inertia = float(d[np.arange(len(x)), labels].sum())
        if inertia > prev + 1e-10 * max(1.0, prev):
            raise AssertionError(f"k-means inertia increased: {prev} -> {inertia}")
        prev = inertia
        if history is not None:
            history.append(inertia)
        point_cost = d[np.arange(len(x)), labels]
        counts = np.bincount(labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            # move the worst-served point into the empty cluster
            far = int(np.where(counts[labels] > 1, point_cost, -1.0).argmax())
            counts[labels[far]] -= 1
            labels[far] = j
            counts[j] = 1
            point_cost[far] = -1.0
        new = np.zeros_like(centers)
        np.add.at(new, labels, x)
        new /= counts[:, None]
        shift = float(np.sqrt(((new - centers) ** 2).sum(axis=1)).max())
        centers = new
        if shift < tol:
            break
    d = _sq_dists(x, centers)
    labels = d.argmin(axis=1)
    inertia = float(d[np.arange(len(x)), labels].sum())
    return labels, centers, inertia


def kmeans(embeddings, k, n_init=10, max_iters=300, tol=1e-6, rng=None, ids=None, normalize=True):
    """k-means++ seeded Lloyd, best of n_init restarts by inertia."""
    x = np.asarray(embeddings, dtype=np.float64)
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(x):
        raise ValueError(f"k={k} exceeds the number of points ({len(x)})")
    if normalize:
        x = x / np.linalg.norm(x, axis=1, keepdims=True)
    rng = rng if rng is not None else make_rng(0)
    best = None
    for _ in range(n_init):
        labels, centers, inertia = lloyd(x, kmeans_pp_init(x, k, rng), max_iters, tol)
        if best is None or inertia < best[2]:
            best = (labels, centers, inertia)
    ids = np.arange(len(x)) if ids is None else np.asarray(ids)
    return ClusterAssignment(ids, best[0].astype(np.int64), best[1], best[2])


def _contingency(a, b):
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    return table


def _check_aligned(pred, truth):
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"label sets are not aligned: {pred.shape} vs {truth.shape}")
    if len(pred) == 0:
        raise ValueError("empty labelings")
    return pred, truth


def purity(pred, truth):
    """Fraction of points that belong to their cluster's majority class."""
    pred, truth = _check_aligned(pred, truth)
    return float(_contingency(pred, truth).max(axis=1).sum() / len(pred))


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(pred, truth):
    """Mutual information over the arithmetic mean of the two entropies."""
    pred, truth = _check_aligned(pred, truth)
    t = _contingency(pred, truth)
    n = t.sum()
    ha, hb = _entropy(t.sum(1)), _entropy(t.sum(0))
    if ha == 0 or hb == 0:
        return 0.0
    pij = t / n
    outer = t.sum(1, keepdims=True) @ t.sum(0, keepdims=True) / (n * n)
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    return float(min(max(mi / ((ha + hb) / 2), 0.0), 1.0))


def write_assignment_csv(path, assignment):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["utterance_id", "pseudo_label"])
        for i, l in zip(assignment.ids.tolist(), assignment.labels.tolist()):
            w.writerow([i, l])


def read_assignment_csv(path):
    with open(path, newline="") as f:
        rows = [(int(r["utterance_id"]), int(r["pseudo_label"])) for r in csv.DictReader(f)]
    ids, labels = zip(*rows)
    return np.array(ids, dtype=np.int64), np.array(labels, dtype=np.int64)
