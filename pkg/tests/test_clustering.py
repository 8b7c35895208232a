import itertools

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from conftest import make_blobs
from fewtab.clustering import ClusteringError, assign, kmeans


def brute_force_best_inertia(points: np.ndarray, k: int = 2) -> float:
    """Exhaustive search over all k-partitions (tiny n only)."""
    n = len(points)
    best = np.inf
    for labels in itertools.product(range(k), repeat=n):
        labels = np.asarray(labels)
        if len(set(labels.tolist())) < k:
            continue
        inertia = 0.0
        for c in range(k):
            group = points[labels == c]
            inertia += float(((group - group.mean(axis=0)) ** 2).sum())
        best = min(best, inertia / n)
    return best


def test_each_point_its_own_centroid_when_k_equals_n():
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(6, 3))
    result = kmeans(pts, k=6, seed=1)
    assert result.inertia == pytest.approx(0.0, abs=1e-12)
    assert sorted(map(tuple, result.centroids.tolist())) == sorted(map(tuple, pts.tolist()))
    assert len(set(result.assignments.tolist())) == 6


def test_two_tight_pairs_match_exhaustive_partition_oracle():
    pts = np.array([[0.0, 0.0], [0.0, 0.1], [5.0, 5.0], [5.0, 5.1]])
    result = kmeans(pts, k=2, seed=3)
    assert result.inertia == pytest.approx(brute_force_best_inertia(pts, 2), abs=1e-9)
    np.testing.assert_allclose(
        sorted(result.centroids.tolist()), [[0.0, 0.05], [5.0, 5.05]], atol=1e-12
    )
    assert result.assignments[0] == result.assignments[1]
    assert result.assignments[2] == result.assignments[3]


def test_single_point_single_cluster():
    pts = np.array([[2.5, -1.0]])
    result = kmeans(pts, k=1, seed=0)
    np.testing.assert_array_equal(result.centroids, pts)
    assert result.inertia == pytest.approx(0.0, abs=1e-12)


def test_assign_exact_centroid_and_tie_rule():
    centroids = np.array([[0.0], [1.0], [2.0], [3.0]])
    assert assign(np.array([[3.0]]), centroids)[0] == 3
    # midpoint between centroids 0 and 1 ties to the lower index
    assert assign(np.array([[0.5]]), centroids)[0] == 0


def test_assign_batch_equals_per_point():
    rng = np.random.default_rng(5)
    pts = rng.normal(size=(20, 4))
    centroids = rng.normal(size=(3, 4))
    batch = assign(pts, centroids)
    single = [assign(p[None, :], centroids)[0] for p in pts]
    np.testing.assert_array_equal(batch, single)


def test_assign_dimension_mismatch():
    with pytest.raises(ClusteringError):
        assign(np.zeros((3, 2)), np.zeros((2, 5)))


def test_inertia_monotone_nonincreasing():
    for seed in range(25):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(60, 5))
        result = kmeans(pts, k=4, seed=seed)
        hist = result.inertia_history
        assert all(a >= b - 1e-12 for a, b in zip(hist, hist[1:])), hist


def test_converged_assignments_are_a_fixed_point():
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        pts = rng.normal(size=(80, 3))
        result = kmeans(pts, k=5, seed=seed)
        np.testing.assert_array_equal(assign(pts, result.centroids), result.assignments)


def test_three_blobs_recovered_exactly_across_seeds():
    centers = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
    x, y = make_blobs(40, centers, std=0.1, seed=42)
    for seed in range(20):
        result = kmeans(x, k=3, seed=seed)
        assert adjusted_rand_score(y, result.assignments) == 1.0


def test_row_permutation_permutes_assignments_identically():
    rng = np.random.default_rng(9)
    base = rng.normal(size=(15, 3))
    pts = np.vstack([base, base, base[:5]])  # duplicated-row table
    result = kmeans(pts, k=4, seed=7)
    perm = rng.permutation(len(pts))
    permuted_result = kmeans(pts[perm], k=4, seed=7)
    np.testing.assert_array_equal(permuted_result.assignments, result.assignments[perm])
    np.testing.assert_array_equal(permuted_result.centroids, result.centroids)


def test_same_seed_bitwise_identical():
    rng = np.random.default_rng(11)
    pts = rng.normal(size=(50, 4))
    a = kmeans(pts, k=3, seed=123)
    b = kmeans(pts, k=3, seed=123)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    np.testing.assert_array_equal(a.assignments, b.assignments)
    assert a.inertia == b.inertia


def test_errors():
    with pytest.raises(ClusteringError):
        kmeans(np.zeros((2, 2)), k=3, seed=0)
    with pytest.raises(ClusteringError):
        kmeans(np.array([[np.nan, 0.0], [1.0, 2.0]]), k=1, seed=0)
    with pytest.raises(ClusteringError):
        kmeans(np.zeros((4, 2)), k=0, seed=0)


def test_duplicate_points_more_clusters_than_distinct_values():
    pts = np.array([[0.0, 0.0]] * 5 + [[1.0, 1.0]] * 3)
    result = kmeans(pts, k=3, seed=2)
    assert result.inertia == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_array_equal(assign(pts, result.centroids), result.assignments)
