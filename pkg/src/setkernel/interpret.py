"""Per-cell scores and the region-level analyses built on top of them.

A cell's score is phi(x).beta + bias, so the decision value of a sample is
exactly the mean of its cell scores. Regions come from k-means over pooled
sub-selected cells; each region gets two scores (its centroid scored
directly, and the average of its member-cell scores), a per-sample frequency
vector, a score gradient, and a rank-sum test on frequency differences.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from math import comb, erfc, sqrt
from typing import Sequence

import numpy as np

from .classifier import LinearModel, solve_hinge
from .data import SampleSet
from .rff import featurize_batch, philox_rng


@dataclass(frozen=True)
class ClusterModel:
    """k-means centroids with assignments for the cells they were fit on."""

    centroids: np.ndarray
    assignments: np.ndarray
    C: int
    inertia: float
    seed: int
    inertia_history: tuple[float, ...] = ()

    def __post_init__(self):
        centroids = np.asarray(self.centroids, dtype=np.float64)
        if centroids.shape[0] != self.C or self.C < 2:
            raise ValueError(f"expected {self.C} centroids (C >= 2), got {centroids.shape}")
        assignments = np.asarray(self.assignments, dtype=int)
        centroids = centroids.copy()
        centroids.setflags(write=False)
        assignments = assignments.copy()
        assignments.setflags(write=False)
        object.__setattr__(self, "centroids", centroids)
        object.__setattr__(self, "assignments", assignments)

    @property
    def d(self) -> int:
        return self.centroids.shape[1]


@dataclass(frozen=True)
class RegionScores:
    """Region-level outputs: both score variants plus per-sample frequencies."""

    centroid_scores: np.ndarray  # (C,)
    average_scores: np.ndarray   # (C,)
    frequencies: np.ndarray      # (N, C), rows on the simplex
    sample_ids: tuple[str, ...]


def cell_scores(model: LinearModel, X: np.ndarray) -> np.ndarray:
    """Scores phi(x).beta + bias for each row of X."""
    return featurize_batch(model.rff, X) @ model.beta + model.bias


def cell_score(model: LinearModel, x: np.ndarray) -> float:
    """Score of a single cell."""
    x = np.asarray(x, dtype=np.float64).ravel()
    return float(cell_scores(model, x[None, :])[0])


def _sq_dists(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(X * X, axis=1)[:, None]
        - 2.0 * (X @ centroids.T)
        + np.sum(centroids * centroids, axis=1)[None, :]
    )
    np.maximum(d2, 0.0, out=d2)
    return d2


def assign_clusters(clusters: ClusterModel, X: np.ndarray) -> np.ndarray:
    """Nearest-centroid id per row (ties go to the smallest cluster id)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != clusters.d:
        raise ValueError(f"cells have d={X.shape[1]}, clusters expect d={clusters.d}")
    return np.argmin(_sq_dists(X, clusters.centroids), axis=1)


def kmeans(X: np.ndarray, C: int, seed: int, max_iter: int = 300,
           init: np.ndarray | None = None) -> ClusterModel:
    """Lloyd's algorithm with seeded k-means++ initialization.

    Deterministic for a fixed seed. Empty clusters are repaired by reseeding
    with the point farthest from its assigned centroid. An explicit init
    matrix (C x d) overrides the k-means++ start.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, d = X.shape
    if C < 2:
        raise ValueError(f"C must be >= 2, got {C}")
    n_distinct = np.unique(X, axis=0).shape[0]
    if n_distinct < C:
        raise ValueError(f"only {n_distinct} distinct cells for C={C} clusters")
    if init is not None:
        centroids = np.array(init, dtype=np.float64)
        if centroids.shape != (C, d):
            raise ValueError(f"init must be ({C}, {d}), got {centroids.shape}")
    else:
        centroids = _kmeanspp_init(X, C, seed)
    assignments = np.argmin(_sq_dists(X, centroids), axis=1)
    history = []
    for _ in range(max_iter):
        for c in range(C):
            mask = assignments == c
            if mask.any():
                centroids[c] = X[mask].mean(axis=0)
        d2 = _sq_dists(X, centroids)
        point_cost = d2[np.arange(n), assignments]
        for c in range(C):
            if not np.any(assignments == c):
                far = int(np.argmax(point_cost))
                centroids[c] = X[far]
                assignments[far] = c
                d2[:, c] = np.sum((X - centroids[c]) ** 2, axis=1)
                point_cost = d2[np.arange(n), assignments]
        new_assignments = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(n), new_assignments].sum()))
        if np.array_equal(new_assignments, assignments):
            assignments = new_assignments
            break
        assignments = new_assignments
    # final pass: centroids consistent with final assignments, and vice versa
    for c in range(C):
        mask = assignments == c
        if mask.any():
            centroids[c] = X[mask].mean(axis=0)
    d2 = _sq_dists(X, centroids)
    assignments = np.argmin(d2, axis=1)
    point_cost = d2[np.arange(n), assignments]
    for c in range(C):  # repair any cluster emptied by the last reassignment
        if not np.any(assignments == c):
            far = int(np.argmax(point_cost))
            centroids[c] = X[far]
            assignments[far] = c
            d2[:, c] = np.sum((X - centroids[c]) ** 2, axis=1)
            point_cost = d2[np.arange(n), assignments]
    inertia = float(d2[np.arange(n), assignments].sum())
    return ClusterModel(centroids=centroids, assignments=assignments, C=C,
                        inertia=inertia, seed=int(seed),
                        inertia_history=tuple(history))


def _kmeanspp_init(X: np.ndarray, C: int, seed: int) -> np.ndarray:
    rng = philox_rng(seed)
    n = X.shape[0]
    centroids = np.empty((C, X.shape[1]))
    first = int(rng.integers(0, n))
    centroids[0] = X[first]
    closest = np.sum((X - centroids[0]) ** 2, axis=1)
    for c in range(1, C):
        total = closest.sum()
        cum = np.cumsum(closest / total)
        idx = int(np.searchsorted(cum, rng.random(), side="right"))
        idx = min(idx, n - 1)
        centroids[c] = X[idx]
        closest = np.minimum(closest, np.sum((X - centroids[c]) ** 2, axis=1))
    return centroids


def centroid_score(model: LinearModel, clusters: ClusterModel) -> np.ndarray:
    """Score each cluster by featurizing its centroid directly."""
    return cell_scores(model, clusters.centroids)


def average_score(model: LinearModel, clusters: ClusterModel,
                  X: np.ndarray) -> np.ndarray:
    """Score each cluster as the mean score of its member cells.

    X must be the cell matrix the cluster assignments refer to. Generally
    differs from centroid_score because the feature map is nonlinear.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[0] != clusters.assignments.shape[0]:
        raise ValueError("X rows must match the cells the clustering was fit on")
    scores = cell_scores(model, X)
    out = np.empty(clusters.C)
    for c in range(clusters.C):
        mask = clusters.assignments == c
        if not mask.any():
            raise ValueError(f"cluster {c} has no member cells")
        out[c] = scores[mask].mean()
    return out


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    """Pearson correlation coefficient of two equal-length sequences."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.shape[0] < 2:
        raise ValueError("need at least two points")
    da = a - a.mean()
    db = b - b.mean()
    va = float(da @ da)
    vb = float(db @ db)
    if va == 0.0 or vb == 0.0:
        raise ValueError("zero variance")
    r = float(da @ db) / sqrt(va * vb)
    return float(min(1.0, max(-1.0, r)))


def cluster_frequencies(sample: SampleSet, clusters: ClusterModel) -> np.ndarray:
    """Fraction of the sample's cells nearest to each centroid; sums to 1."""
    ids = assign_clusters(clusters, sample.cells)
    counts = np.bincount(ids, minlength=clusters.C).astype(np.float64)
    return counts / sample.n


def train_frequency_model(freqs: Sequence[np.ndarray], labels: Sequence[int],
                          reg_c: float = 1.0, tol: float = 1e-6,
                          max_iter: int = 100_000) -> tuple[np.ndarray, float]:
    """Fit the hinge-loss linear model on cluster-frequency features."""
    X = np.stack([np.asarray(f, dtype=np.float64).ravel() for f in freqs])
    res = solve_hinge(X, np.asarray(labels, dtype=np.float64), reg_c=reg_c,
                      tol=tol, max_iter=max_iter)
    return res.w, float(res.bias)


def frequency_score_predict(freqs: np.ndarray, cluster_scores: np.ndarray) -> float:
    """Weight fixed per-cluster scores by their prevalence in a sample.

    With centroid scores this is the centroid-weighted predictor; with
    average scores, the member-average-weighted predictor. The predicted
    label is the sign of the returned value.
    """
    freqs = np.asarray(freqs, dtype=np.float64).ravel()
    cluster_scores = np.asarray(cluster_scores, dtype=np.float64).ravel()
    if freqs.shape != cluster_scores.shape:
        raise ValueError(
            f"length mismatch: {freqs.shape[0]} frequencies vs "
            f"{cluster_scores.shape[0]} scores"
        )
    return float(freqs @ cluster_scores)


def region_scores(model: LinearModel, clusters: ClusterModel, pooled: np.ndarray,
                  samples: Sequence[SampleSet]) -> RegionScores:
    """Bundle centroid/average scores with per-sample cluster frequencies."""
    return RegionScores(
        centroid_scores=centroid_score(model, clusters),
        average_scores=average_score(model, clusters, pooled),
        frequencies=np.stack([cluster_frequencies(s, clusters) for s in samples]),
        sample_ids=tuple(s.sample_id for s in samples),
    )


def score_gradient(model: LinearModel, x: np.ndarray) -> np.ndarray:
    """Gradient of the cell score with respect to the cell, shape (d,).

    The bias contributes nothing; equals featurize_jacobian(x)^T beta,
    computed directly as scale * W (beta_sin*cos(z) - beta_cos*sin(z)).
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    rmap = model.rff
    if x.shape[0] != rmap.d:
        raise ValueError(f"cell has d={x.shape[0]}, model expects d={rmap.d}")
    z = x @ rmap.W
    half = rmap.D // 2
    coeff = model.beta[:half] * np.cos(z) - model.beta[half:] * np.sin(z)
    return rmap.scale * (rmap.W @ coeff)


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.shape[0])
    i = 0
    while i < values.shape[0]:
        j = i
        while j + 1 < values.shape[0] and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def use_exact_rank_sum(n1: int, n2: int) -> bool:
    """Exact enumeration applies for min(n) <= 20 and combined n <= 25."""
    return min(n1, n2) <= 20 and n1 + n2 <= 25


def _rank_sum_distribution(ranks2: np.ndarray, n1: int):
    """Count n1-subsets of the doubled ranks by their sum (exact null DP)."""
    total_sum = int(ranks2.sum())
    # ways[k][s] = number of k-subsets of the doubled ranks summing to s
    ways = np.zeros((n1 + 1, total_sum + 1), dtype=np.int64)
    ways[0, 0] = 1
    for r in ranks2:
        r = int(r)
        for k in range(n1, 0, -1):  # descending so row k-1 is pre-item state
            ways[k, r:] += ways[k - 1, :total_sum + 1 - r]
    return ways[n1], np.arange(total_sum + 1)


def rank_sum_test(a: Sequence[float], b: Sequence[float]) -> float:
    """Two-sided rank-sum test on two samples; ties get midranks.

    Small inputs (min group <= 20 and combined <= 25) are handled by exact
    enumeration of the permutation distribution; larger ones use the normal
    approximation with tie correction and continuity correction. The p-value
    is clamped to (0, 1].
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    n1, n2 = a.shape[0], b.shape[0]
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be non-empty")
    values = np.concatenate([a, b])
    ranks = _midranks(values)
    w = float(ranks[:n1].sum())
    n = n1 + n2
    mean_w = n1 * (n + 1) / 2.0
    if use_exact_rank_sum(n1, n2):
        ranks2 = np.rint(2.0 * ranks).astype(np.int64)  # doubled midranks are integers
        counts, sums = _rank_sum_distribution(ranks2, n1)
        e2 = n1 * (n + 1)  # doubled expectation of the group-1 rank sum
        obs_dev = abs(int(np.rint(2.0 * w)) - e2)
        extreme = counts[np.abs(sums - e2) >= obs_dev].sum()
        p = float(extreme) / float(comb(n, n1))
    else:
        _, tie_counts = np.unique(values, return_counts=True)
        tie_term = float(np.sum(tie_counts ** 3 - tie_counts)) / (n * (n - 1))
        var_w = n1 * n2 / 12.0 * ((n + 1) - tie_term)
        if var_w <= 0.0:
            return 1.0
        z = max(0.0, abs(w - mean_w) - 0.5) / sqrt(var_w)
        p = erfc(z / sqrt(2.0))
    return float(min(1.0, max(p, np.finfo(float).tiny)))


def brute_force_rank_sum_p(a: Sequence[float], b: Sequence[float]) -> float:
    """Independent oracle: enumerate every group-1 subset explicitly.

    Only feasible for small inputs; used to validate the exact path.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    n1, n = a.shape[0], a.shape[0] + b.shape[0]
    ranks2 = np.rint(2.0 * _midranks(np.concatenate([a, b]))).astype(np.int64)
    e2 = n1 * (n + 1)
    obs = abs(int(ranks2[:n1].sum()) - e2)
    extreme = 0
    total = 0
    for subset_idx in combinations(range(n), n1):
        total += 1
        if abs(int(ranks2[list(subset_idx)].sum()) - e2) >= obs:
            extreme += 1
    return extreme / total
