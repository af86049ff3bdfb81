"""Segmentation of a reconstructed conductivity into K phases.

Clusters the values kappa = exp(q) with one-dimensional K-means, then
either thresholds at the midpoints between sorted cluster means or uses
cluster membership directly.  The segmented field replaces every value by
its phase mean.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import SegmentationError

__all__ = ["SegmentationResult", "kmeans_1d", "segment_field", "phase_accuracy", "wcss"]


def wcss(values, labels, means) -> float:
    """Within-cluster sum of squares."""
    values = np.asarray(values, dtype=float)
    return float(np.sum((values - np.asarray(means)[labels]) ** 2))


def _plusplus(x, K, rng):
    centers = [x[rng.integers(len(x))]]
    d2 = (x - centers[0]) ** 2
    for _ in range(1, K):
        total = d2.sum()
        if total == 0:
            # all remaining mass sits on chosen centres; pick any unused value
            rest = np.setdiff1d(np.unique(x), centers)
            centers.append(rest[rng.integers(len(rest))])
        else:
            centers.append(x[rng.choice(len(x), p=d2 / total)])
        d2 = np.minimum(d2, (x - centers[-1]) ** 2)
    return np.sort(np.asarray(centers, dtype=float))


def _lloyd(x, centers, max_iter):
    labels = None
    for _ in range(max_iter):
        # sorted centres in 1D: nearest centre via midpoints
        mids = 0.5 * (centers[1:] + centers[:-1])
        new = np.searchsorted(mids, x, side="left")
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        counts = np.bincount(labels, minlength=len(centers))
        sums = np.bincount(labels, weights=x, minlength=len(centers))
        empty = counts == 0
        if empty.any():
            # re-seed empty clusters at the worst-fit points
            err = (x - centers[labels]) ** 2
            far = np.argsort(-err, kind="stable")[: int(empty.sum())]
            centers = centers.copy()
            centers[empty] = x[far]
            centers[~empty] = sums[~empty] / counts[~empty]
        else:
            centers = sums / counts
        centers = np.sort(centers)
    mids = 0.5 * (centers[1:] + centers[:-1])
    return np.searchsorted(mids, x, side="left")


def _refine(x, labels, K):
    """Coordinate descent on the cluster boundaries of the sorted values.

    Lloyd fixed points in 1D can be local minima.  Each boundary in turn is
    moved to the WCSS-optimal position between its neighbours until no
    boundary moves.  Returns the sort order and split positions.
    """
    order = np.argsort(x, kind="stable")
    xs = x[order]
    cuts = np.concatenate([[0], np.cumsum(np.bincount(labels, minlength=K))])
    s1 = np.concatenate([[0.0], np.cumsum(xs)])
    s2 = np.concatenate([[0.0], np.cumsum(xs * xs)])

    def cost(i, j):
        m = np.maximum(j - i, 1)
        t = s1[j] - s1[i]
        return s2[j] - s2[i] - t * t / m

    moved = True
    while moved:
        moved = False
        for i in range(1, K):
            a, b = cuts[i - 1], cuts[i + 1]
            m = np.arange(a + 1, b)
            if len(m) == 0:
                continue
            total = cost(a, m) + cost(m, b)
            here = cost(a, cuts[i]) + cost(cuts[i], b)
            k = int(np.argmin(total))
            if total[k] < here - 1e-12 * max(here, 1.0):
                cuts[i] = m[k]
                moved = True
    return order, cuts


def _means(x, labels, K):
    # offset from a member so that a constant cluster gets its value exactly
    counts = np.bincount(labels, minlength=K)
    first = np.zeros(K, dtype=np.int64)
    first[labels[::-1]] = np.arange(len(x))[::-1]
    ref = x[first]
    return ref + np.bincount(labels, weights=x - ref[labels], minlength=K) / counts


def kmeans_1d(values, K: int, seed: int = 0, restarts: int = 20, max_iter: int = 300):
    """Lloyd's algorithm with k-means++ seeding, best of ``restarts`` runs.

    Each run ends with boundary moves that lower the WCSS further.

    Returns ``(means, labels)`` with means sorted ascending and labels
    indexing into them.  Ties in WCSS keep the earliest restart.
    """
    x = np.asarray(values, dtype=float).ravel()
    if K < 2:
        raise SegmentationError(f"need at least 2 clusters, got K={K}")
    if len(x) < K:
        raise SegmentationError(f"{len(x)} values cannot form {K} clusters")
    if not np.isfinite(x).all():
        raise SegmentationError("values must be finite")
    n_distinct = len(np.unique(x))
    if n_distinct < K:
        raise SegmentationError(f"only {n_distinct} distinct value(s) for K={K} clusters")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(restarts):
        labels = _lloyd(x, _plusplus(x, K, rng), max_iter)
        order, cuts = _refine(x, labels, K)
        labels = np.empty(len(x), dtype=np.int64)
        labels[order] = np.repeat(np.arange(K), np.diff(cuts))
        means = _means(x, labels, K)
        cost = wcss(x, labels, means)
        if best is None or cost < best[0]:
            best = (cost, means, labels)
    return best[1], best[2]


@dataclass
class SegmentationResult:
    K: int
    means: np.ndarray
    thresholds: np.ndarray
    labels: np.ndarray
    kappa_d: np.ndarray
    mode: str
    summary: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {"K": self.K, "means": [float(m) for m in self.means],
               "thresholds": [float(t) for t in self.thresholds], "mode": self.mode}
        out.update(self.summary)
        return out


def segment_field(kappa, K: int, mode: str = "threshold", seed: int = 0) -> SegmentationResult:
    """Cluster ``kappa`` into ``K`` phases.

    ``mode="threshold"`` assigns phase ``i`` to ``rho_{i-1} < kappa <= rho_i``
    with midpoints ``rho_i`` between consecutive means, ``rho_0 = 0`` and
    the top interval unbounded; ``mode="direct"`` keeps K-means membership.
    """
    kappa = np.asarray(kappa, dtype=float).ravel()
    if mode not in ("threshold", "direct"):
        raise ValueError(f"unknown segmentation mode {mode!r}")
    if (kappa <= 0).any():
        raise SegmentationError("conductivity values must be positive")
    means, labels = kmeans_1d(kappa, K, seed)
    thresholds = 0.5 * (means[1:] + means[:-1])
    if mode == "threshold":
        labels = np.searchsorted(thresholds, kappa, side="left")
    return SegmentationResult(K, means, thresholds, labels, means[labels], mode)


def phase_accuracy(labels, truth, K: Optional[int] = None) -> dict:
    """Fraction correct after the best label permutation, and per-phase Dice.

    Dice is reported for the phases of ``truth`` under the matched
    permutation.
    """
    labels = np.asarray(labels).ravel()
    truth = np.asarray(truth).ravel()
    if labels.shape != truth.shape:
        raise ValueError(f"label length {len(labels)} does not match truth length {len(truth)}")
    K = int(max(labels.max(initial=0), truth.max(initial=0)) + 1) if K is None else K
    conf = np.zeros((K, K), dtype=np.int64)
    np.add.at(conf, (labels, truth), 1)
    if K <= 8:
        perms = itertools.permutations(range(K))
        best = max(perms, key=lambda p: sum(conf[p[t], t] for t in range(K)))
    else:
        from scipy.optimize import linear_sum_assignment
        r, c = linear_sum_assignment(-conf)
        best = tuple(r[np.argsort(c)])
    correct = sum(conf[best[t], t] for t in range(K))
    dice = []
    for t in range(K):
        a = int(conf[best[t], :].sum())
        b = int(conf[:, t].sum())
        dice.append(2.0 * conf[best[t], t] / (a + b) if a + b else 1.0)
    return {"accuracy": correct / len(truth), "dice": dice, "permutation": list(best)}
