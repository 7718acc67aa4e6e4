"""Seeded K-means over novel-frame embeddings and the assignment that turns
cluster ids into evaluation labels."""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment


def _kmeans_plus_plus(points: np.ndarray, num_clusters: int, rng: np.random.Generator) -> np.ndarray:
    """D-squared seeding: each new centroid is drawn with probability
    proportional to its squared distance from the nearest chosen one."""
    n = points.shape[0]
    centroids = np.empty((num_clusters, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = points[first]
    closest_sq = ((points - centroids[0]) ** 2).sum(axis=1)
    for k in range(1, num_clusters):
        total = closest_sq.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest_sq / total))
        else:
            idx = int(rng.integers(n))
        centroids[k] = points[idx]
        closest_sq = np.minimum(closest_sq, ((points - centroids[k]) ** 2).sum(axis=1))
    return centroids


def kmeans(
    points: np.ndarray,
    num_clusters: int,
    seed: int,
    max_iters: int = 300,
    tol: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray]:
    """Lloyd iterations from a seeded D-squared start.

    Returns (labels (n,), centroids (num_clusters, d)). Assignment ties go to
    the lowest cluster index; a cluster left empty is re-seeded on the point
    currently farthest from its assigned centroid. Stops when the largest
    centroid shift drops below ``tol`` or after ``max_iters`` rounds.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"points must be (n, d), got shape {points.shape}")
    n = points.shape[0]
    if num_clusters < 1:
        raise ValueError(f"need at least one cluster, got {num_clusters}")
    if n < num_clusters:
        raise ValueError(f"cannot form {num_clusters} clusters from {n} points")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_plus_plus(points, num_clusters, rng)
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(max_iters):
        sq_dist = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = sq_dist.argmin(axis=1)
        assigned_sq = sq_dist[np.arange(n), labels]
        new_centroids = centroids.copy()
        for k in range(num_clusters):
            members = points[labels == k]
            if len(members) > 0:
                new_centroids[k] = members.mean(axis=0)
            else:
                stray = int(assigned_sq.argmax())
                new_centroids[k] = points[stray]
                assigned_sq[stray] = 0.0
        shift = np.sqrt(((new_centroids - centroids) ** 2).sum(axis=1)).max()
        centroids = new_centroids
        if shift < tol:
            break
    sq_dist = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = sq_dist.argmin(axis=1)
    return labels, centroids


def map_clusters(cluster_ids: np.ndarray, reference_labels: np.ndarray) -> dict[int, int]:
    """Best one-to-one mapping from cluster ids to reference labels.

    Builds the cluster-by-label contingency table and solves the assignment
    that maximizes total agreement. Clusters left without a partner (more
    clusters than labels) receive fresh label ids above every reference label
    so they never collide with a real class.
    """
    cluster_ids = np.asarray(cluster_ids)
    reference_labels = np.asarray(reference_labels)
    if cluster_ids.shape != reference_labels.shape or cluster_ids.ndim != 1:
        raise ValueError("cluster_ids and reference_labels must be equal-length 1-d arrays")
    if cluster_ids.size == 0:
        return {}
    clusters = np.unique(cluster_ids)
    labels = np.unique(reference_labels)
    contingency = np.zeros((len(clusters), len(labels)), dtype=np.int64)
    cluster_pos = {int(c): i for i, c in enumerate(clusters)}
    label_pos = {int(l): j for j, l in enumerate(labels)}
    for c, l in zip(cluster_ids, reference_labels):
        contingency[cluster_pos[int(c)], label_pos[int(l)]] += 1
    rows, cols = linear_sum_assignment(contingency, maximize=True)
    mapping = {int(clusters[r]): int(labels[c]) for r, c in zip(rows, cols)}
    next_fresh = int(labels.max()) + 1
    for c in clusters:
        if int(c) not in mapping:
            mapping[int(c)] = next_fresh
            next_fresh += 1
    return mapping
