"""Complete-linkage agglomerative clustering shared by the tiering strategies."""

from __future__ import annotations

import numpy as np


def agglomerative_cluster(points, k: int) -> np.ndarray:
    """Merge the closest pair of clusters (complete linkage, Euclidean) until
    ``k`` remain.

    Ties go to the pair whose smallest member indices are lowest. Cluster ids
    are assigned in order of each cluster's first point, so point 0 is always
    in cluster 0.
    """
    X = np.asarray(points, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = len(X)
    if not 1 <= k <= max(n, 1):
        raise ValueError(f"k must lie in [1, {n}], got {k}")
    if n == 0:
        return np.zeros(0, dtype=int)
    diff = X[:, None, :] - X[None, :, :]
    D = np.sqrt((diff ** 2).sum(axis=-1))
    np.fill_diagonal(D, np.inf)
    # slot i always holds the cluster whose smallest member is i
    owner = np.arange(n)
    alive = n
    while alive > k:
        # D is symmetric, so the first row-major minimum has i < j
        flat = int(np.argmin(D))
        i, j = divmod(flat, n)
        merged = np.maximum(D[i], D[j])
        D[i, :] = merged
        D[:, i] = merged
        D[i, i] = np.inf
        D[j, :] = np.inf
        D[:, j] = np.inf
        owner[owner == j] = i
        alive -= 1
    _, first = np.unique(owner, return_index=True)
    order = {owner[f]: rank for rank, f in enumerate(sorted(first))}
    return np.array([order[o] for o in owner], dtype=int)


def tiers_by_latency(latencies: dict[str, float], num_tiers: int) -> list[list[str]]:
    """Group clients into latency tiers, fastest tier first, members sorted."""
    ids = sorted(latencies)
    if not ids:
        return []
    k = min(num_tiers, len(ids))
    labels = agglomerative_cluster([latencies[c] for c in ids], k)
    groups: dict[int, list[str]] = {}
    for cid, lab in zip(ids, labels):
        groups.setdefault(int(lab), []).append(cid)
    tiers = sorted(groups.values(), key=lambda g: (np.mean([latencies[c] for c in g]), g[0]))
    return [sorted(t) for t in tiers]
