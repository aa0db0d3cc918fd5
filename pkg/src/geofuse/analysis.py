"""Ensemble statistics, error metrics and representative-member clustering."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_array, check_is_fitted

REL_L2_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class PercentileSeries:
    times: np.ndarray
    levels: tuple
    values: np.ndarray   # (len(levels), n_times)

    def __getitem__(self, level):
        return self.values[self.levels.index(level)]

    @property
    def p10(self):
        return self[10]

    @property
    def p50(self):
        return self[50]

    @property
    def p90(self):
        return self[90]


def percentiles(series, levels=(10, 50, 90), times=None) -> PercentileSeries:
    """Per-time percentiles across members, linear interpolation between order
    statistics: level ``q`` sits at fractional rank ``q/100 * (N - 1)``.

    ``series`` is (N, n_times) (or (N,) for a single time).
    """
    a = np.asarray(series, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[0] == 0:
        raise ValueError("empty ensemble")
    if a.shape[0] < 2:
        raise ValueError("percentiles need at least two members")
    levels = tuple(levels)
    vals = np.percentile(a, levels, axis=0, method="linear")
    # interpolation can round p10 a hair above p50 for near-equal members
    vals = np.maximum.accumulate(vals, axis=0)
    t = np.arange(a.shape[1], dtype=float) if times is None else np.asarray(times, dtype=float)
    return PercentileSeries(t, levels, vals)


def band_area(ps: PercentileSeries, lo=10, hi=90) -> float:
    """Trapezoid-rule area between two percentile curves."""
    gap = ps[hi] - ps[lo]
    if gap.size < 2:
        return float(gap.sum())
    return float(np.sum(0.5 * (gap[1:] + gap[:-1]) * np.diff(ps.times)))


def _align_mask(mask, shape):
    """Broadcast a cell mask onto the first run of axes of ``shape`` it matches."""
    k = mask.ndim
    for a in range(len(shape) - k + 1):
        if tuple(shape[a:a + k]) == mask.shape:
            return mask.reshape((1,) * a + mask.shape + (1,) * (len(shape) - a - k))
    raise ValueError(f"mask of shape {mask.shape} does not fit data of shape {shape}")


def field_error_metrics(pred, truth, active=None):
    """``(max_abs, rel_l2, abs_error)`` over active cells.

    ``rel_l2 = ||pred - truth|| / max(||truth||, 1e-12)``; ``abs_error`` has
    the input shape and is zero outside ``active``.
    """
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    err = np.abs(pred - truth)
    if active is not None:
        mask = _align_mask(np.asarray(active, dtype=bool), pred.shape)
        err = np.where(mask, err, 0.0)
        t = np.where(mask, truth, 0.0)
    else:
        t = truth
    max_abs = float(err.max()) if err.size else 0.0
    rel = float(np.sqrt(np.sum(err ** 2)) / max(np.sqrt(np.sum(t ** 2)), REL_L2_FLOOR))
    return max_abs, rel, err


@dataclass(frozen=True, eq=False)
class Clustering:
    k: int
    labels: np.ndarray
    centroids: np.ndarray
    medoids: np.ndarray | None = None
    inertia: float = 0.0
    n_iter: int = 0

    def __post_init__(self):
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.k):
            raise ValueError("labels outside [0, k)")


def _sq_dist(X, C):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(X, k, rng):
    n = X.shape[0]
    centers = [int(rng.integers(n))]
    d2 = _sq_dist(X, X[centers])[:, 0]
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # every remaining point coincides with a center; take the lowest unused index
            unused = np.setdiff1d(np.arange(n), centers)
            nxt = int(unused[0])
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        centers.append(nxt)
        d2 = np.minimum(d2, _sq_dist(X, X[[nxt]])[:, 0])
    return X[centers].copy()


def _inertia(X, labels, C):
    return float(np.sum((X - C[labels]) ** 2))


def kmeans(vectors, k: int, seed: int = 0, max_iter: int = 300, tol: float = 0.0) -> Clustering:
    """Lloyd's algorithm from k-means++ seeds.

    An empty cluster takes over the point of the largest cluster farthest
    from its centroid.  Inertia is checked to be non-increasing after every
    assignment and update.
    """
    X = np.asarray(vectors, dtype=float)
    if X.ndim != 2:
        raise ValueError("vectors must be a 2-D (members, features) array")
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k = {k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    C = _kmeanspp(X, k, rng)
    labels = np.argmin(_sq_dist(X, C), axis=1)
    prev = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        labels = np.argmin(_sq_dist(X, C), axis=1)
        cur = _inertia(X, labels, C)
        _check_monotone(prev, cur, it, "assignment")
        prev = cur
        for j in range(k):
            if not np.any(labels == j):
                big = np.argmax(np.bincount(labels, minlength=k))
                members = np.flatnonzero(labels == big)
                far = members[np.argmax(np.sum((X[members] - C[big]) ** 2, axis=1))]
                labels[far] = j
                C[j] = X[far]
        newC = np.stack([X[labels == j].mean(axis=0) for j in range(k)])
        cur = _inertia(X, labels, newC)
        _check_monotone(prev, cur, it, "update")
        shift = float(np.max(np.abs(newC - C)))
        C, prev = newC, cur
        if shift <= tol:
            break
    return Clustering(k, labels, C, inertia=prev, n_iter=it)


def _check_monotone(prev, cur, it, phase):
    if cur > prev + 1e-9 * max(abs(prev), 1.0):
        raise AssertionError(f"k-means inertia rose in {phase} step {it}: {prev!r} -> {cur!r}")


def kmedoids_centers(vectors, labels) -> np.ndarray:
    """Member index minimizing the summed Euclidean distance within each cluster
    (ties to the lowest index); clusters ``0 .. labels.max()``."""
    X = np.asarray(vectors, dtype=float)
    labels = np.asarray(labels)
    k = int(labels.max()) + 1 if labels.size else 0
    out = np.empty(k, dtype=int)
    for j in range(k):
        idx = np.flatnonzero(labels == j)
        if idx.size == 0:
            raise ValueError(f"cluster {j} is empty")
        sub = X[idx]
        dist = cdist(sub, sub)
        out[j] = idx[int(np.argmin(dist.sum(axis=1)))]
    return out


def ensemble_moments(fields):
    """Per-cell sample mean and standard deviation (``ddof=1``).

    ``fields`` is an :class:`~geofuse.geostat.Ensemble`, a list of GeoModels
    or an (N, ...) array of log-permeability values.
    """
    if hasattr(fields, "members"):
        fields = fields.members
    if isinstance(fields, (list, tuple)) and fields and hasattr(fields[0], "logk"):
        a = np.stack([m.logk for m in fields])
    else:
        a = np.asarray(fields, dtype=float)
    if a.shape[0] < 2:
        raise ValueError("moments need at least two members")
    return a.mean(axis=0), a.std(axis=0, ddof=1)


class RepresentativeClusters(ClusterMixin, BaseEstimator):
    """k-means partition with k-medoids representatives."""

    def __init__(self, n_clusters: int = 5, seed: int = 0, max_iter: int = 300):
        self.n_clusters = n_clusters
        self.seed = seed
        self.max_iter = max_iter

    def fit(self, X, y=None):
        X = check_array(X)
        res = kmeans(X, self.n_clusters, self.seed, self.max_iter)
        self.labels_ = res.labels
        self.cluster_centers_ = res.centroids
        self.inertia_ = res.inertia
        self.n_iter_ = res.n_iter
        self.medoid_indices_ = kmedoids_centers(X, res.labels)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        X = check_array(X)
        return np.argmin(_sq_dist(X, self.cluster_centers_), axis=1)
