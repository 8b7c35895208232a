"""Lloyd's k-means with k-means++ seeding.

Cluster assignments become task pseudo-labels, so the implementation favors
determinism: a fixed seed yields bitwise-identical results, and the row
order of the input does not matter because points are put into a canonical
order before seeding. The reported inertia is the mean squared distance of
points to their assigned centroids.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FewtabError


class ClusteringError(FewtabError):
    pass


@dataclass(frozen=True)
class ClusteringResult:
    centroids: np.ndarray  # (k, d)
    assignments: np.ndarray  # (n,) int64, assignments[i] is nearest centroid of row i
    inertia: float  # mean squared distance to assigned centroid
    iterations: int
    inertia_history: tuple[float, ...] = field(default=(), repr=False)


def squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances, shape (n_points, n_centroids)."""
    if points.shape[1] != centroids.shape[1]:
        raise ClusteringError(
            f"dimension mismatch: points have {points.shape[1]} columns, "
            f"centroids have {centroids.shape[1]}"
        )
    d2 = (
        np.sum(points * points, axis=1)[:, None]
        - 2.0 * (points @ centroids.T)
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    return np.maximum(d2, 0.0)


def assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Nearest-centroid index per point; ties break to the lowest index."""
    points = np.asarray(points, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if points.ndim == 1:
        points = points[None, :]
    return np.argmin(squared_distances(points, centroids), axis=1)


def _plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    centroids[0] = points[int(rng.integers(n))]
    d2 = squared_distances(points, centroids[:1])[:, 0]
    for j in range(1, k):
        total = float(d2.sum())
        if total > 0.0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            # remaining points duplicate the chosen centroids; fall back to uniform
            idx = int(rng.integers(n))
        centroids[j] = points[idx]
        d2 = np.minimum(d2, squared_distances(points, centroids[j : j + 1])[:, 0])
    return centroids


def _cluster_means(points: np.ndarray, labels: np.ndarray, k: int, previous: np.ndarray) -> np.ndarray:
    onehot = np.zeros((points.shape[0], k), dtype=np.float64)
    onehot[np.arange(points.shape[0]), labels] = 1.0
    counts = onehot.sum(axis=0)
    sums = onehot.T @ points
    means = previous.copy()
    filled = counts > 0
    means[filled] = sums[filled] / counts[filled, None]
    return means


def kmeans(points, k: int, max_iter: int = 100, tol: float = 1e-4, seed=0) -> ClusteringResult:
    """Cluster points into k groups with Lloyd iterations.

    Starts from k-means++ seeding and stops when the relative drop in
    inertia falls below ``tol`` or after ``max_iter`` iterations. Empty
    clusters are reseeded to the point currently farthest from its assigned
    centroid. Rows are processed in canonical (lexicographic) order
    internally, so any permutation of the same point multiset produces
    identical centroids and identically permuted assignments for a given
    seed. ``seed`` may be an int, a SeedSequence, or a Generator (the
    generator is consumed).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ClusteringError(f"points must be a 2-D matrix, got shape {pts.shape}")
    n = pts.shape[0]
    if k < 1 or n < k:
        raise ClusteringError(f"need 1 <= k <= n_points, got k={k} with {n} points")
    if not np.all(np.isfinite(pts)):
        raise ClusteringError("points contain non-finite values")
    rng = np.random.default_rng(seed)

    order = np.lexsort(pts.T[::-1])
    spts = np.ascontiguousarray(pts[order])

    centroids = _plusplus_init(spts, k, rng)
    history: list[float] = []
    prev = np.inf
    labels = np.zeros(n, dtype=np.int64)
    iterations = 0
    for iterations in range(1, max_iter + 1):
        d2 = squared_distances(spts, centroids)
        labels = np.argmin(d2, axis=1)
        empty = np.flatnonzero(np.bincount(labels, minlength=k) == 0)
        if empty.size:
            point_d2 = d2[np.arange(n), labels]
            farthest = np.argsort(point_d2, kind="stable")[::-1]
            for slot, c in enumerate(empty):
                centroids[c] = spts[farthest[slot]]
            d2 = squared_distances(spts, centroids)
            labels = np.argmin(d2, axis=1)
        inertia = float(np.mean(d2[np.arange(n), labels]))
        history.append(inertia)
        if iterations > 1 and prev - inertia <= tol * prev:
            break
        if iterations == max_iter:
            break  # keep labels consistent with the centroids they were computed from
        centroids = _cluster_means(spts, labels, k, centroids)
        prev = inertia

    assignments = np.empty(n, dtype=np.int64)
    assignments[order] = labels
    return ClusteringResult(
        centroids=centroids,
        assignments=assignments,
        inertia=history[-1],
        iterations=iterations,
        inertia_history=tuple(history),
    )
