"""Ward agglomerative clustering of state vectors and region scoring.

Merge costs are the Ward increase ``n_i n_j / (n_i + n_j) * ||c_i - c_j||^2``
maintained with the Lance-Williams recurrence, so the full merge history
costs O(n^2) memory and roughly O(n^2) time for typical inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .uncertainty import argmax_lowest

MONOTONE_TOL = 1e-9


@dataclass
class Merge:
    keep: int
    absorbed: int
    cost: float
    size: int


@dataclass
class ClusterPartition:
    """Clusters as sorted index arrays, ordered by their smallest member."""

    clusters: list
    centroids: np.ndarray
    labels: np.ndarray
    merges: list

    def __len__(self):
        return len(self.clusters)

    def scores(self, uncertainties):
        """Mean member uncertainty per cluster."""
        u = np.asarray(uncertainties, dtype=np.float64)
        if len(u) != len(self.labels):
            raise ValueError("one uncertainty per clustered point is required")
        return np.array([u[c].mean() for c in self.clusters])


def ward_cost(n_i, n_j, c_i, c_j):
    d = np.asarray(c_i, dtype=np.float64) - np.asarray(c_j, dtype=np.float64)
    return n_i * n_j / (n_i + n_j) * float(d @ d)


def ward_cluster(points, cutoff=3.0, n_clusters=None):
    """Agglomerate singletons under the Ward criterion.

    Without ``n_clusters`` merging stops once the cheapest merge costs more
    than ``cutoff``. With ``n_clusters`` the dendrogram is cut at exactly
    that many clusters and ``cutoff`` is ignored. Equal costs resolve to
    the lowest ``(i, j)`` pair; a merged cluster keeps the lower index.
    """
    X = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n = len(X)
    if n == 0:
        raise ValueError("cannot cluster an empty point set")
    if n_clusters is None and cutoff <= 0:
        raise ValueError("cutoff must be positive")
    if n_clusters is not None and not 1 <= n_clusters <= n:
        raise ValueError(f"n_clusters must lie in [1, {n}]")

    sq = np.sum(X * X, axis=1)
    D = 0.5 * np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
    np.fill_diagonal(D, np.inf)
    size = np.ones(n)
    members = {i: [i] for i in range(n)}
    nn = np.argmin(D, axis=1)
    nn_cost = D[np.arange(n), nn]
    merges = []
    last = -np.inf
    while len(members) > 1:
        if n_clusters is not None and len(members) <= n_clusters:
            break
        i = int(np.argmin(nn_cost))
        cost = float(nn_cost[i])
        if n_clusters is None and cost > cutoff:
            break
        j = int(nn[i])
        i, j = min(i, j), max(i, j)
        if cost < last - MONOTONE_TOL * max(1.0, abs(last)):
            raise AssertionError("Ward merge costs decreased")
        last = max(last, cost)
        ni, nj = size[i], size[j]
        nk = size
        new_row = ((ni + nk) * D[i] + (nj + nk) * D[j] - nk * cost) / (ni + nj + nk)
        D[i, :] = new_row
        D[:, i] = new_row
        D[j, :] = np.inf
        D[:, j] = np.inf
        D[i, i] = np.inf
        size[i] = ni + nj
        size[j] = 0.0
        members[i].extend(members.pop(j))
        merges.append(Merge(i, j, cost, int(ni + nj)))
        nn_cost[j] = np.inf
        # rows that pointed at i or j must be rescanned; others may improve via i
        stale = np.flatnonzero((nn == i) | (nn == j))
        stale = stale[np.isfinite(nn_cost[stale]) | (stale == i)]
        for k in set(stale.tolist()) | {i}:
            if k == j:
                continue
            nn[k] = int(np.argmin(D[k]))
            nn_cost[k] = D[k, nn[k]]
        better = new_row < nn_cost
        better[i] = False
        better[j] = False
        ties = (new_row == nn_cost) & (i < nn)
        upd = better | ties
        nn[upd] = i
        nn_cost[upd] = new_row[upd]

    clusters = [np.array(sorted(m)) for _, m in sorted(members.items())]
    labels = np.empty(n, dtype=int)
    for c, idx in enumerate(clusters):
        labels[idx] = c
    centroids = np.array([X[idx].mean(axis=0) for idx in clusters])
    return ClusterPartition(clusters, centroids, labels, merges)


def singletons(n):
    """Trivial partition with every point in its own cluster."""
    clusters = [np.array([i]) for i in range(n)]
    return ClusterPartition(clusters, np.empty((n, 0)), np.arange(n), [])


def region_select(partition, uncertainties, rng):
    """Uniform random member of the highest mean-uncertainty cluster.

    Returns ``(point_index, cluster_index)``.
    """
    scores = partition.scores(uncertainties)
    c = argmax_lowest(scores)
    members = partition.clusters[c]
    return int(members[rng.integers(len(members))]), c
