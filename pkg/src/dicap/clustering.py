"""Multi-restart k-means (k-means++ seeding, Lloyd iterations)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    inertia: float


def _sq_dist(points, centroids):
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)


def _plusplus(points, k, rng):
    n = len(points)
    centroids = [points[rng.integers(n)]]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        tot = d2.sum()
        if tot <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / tot)
        centroids.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centroids, dtype=np.float64)


def _lloyd(points, centroids, max_iter, tol):
    for _ in range(max_iter):
        d2 = _sq_dist(points, centroids)
        labels = d2.argmin(axis=1)
        new = centroids.copy()
        for j in range(len(centroids)):
            members = labels == j
            if members.any():
                new[j] = points[members].mean(axis=0)
            else:
                # empty cluster: reseed at the point farthest from its centroid
                far = d2[np.arange(len(points)), labels].argmax()
                new[j] = points[far]
                labels[far] = j
                d2[far, :] = 0.0
        shift = np.abs(new - centroids).max()
        centroids = new
        if shift <= tol:
            break
    d2 = _sq_dist(points, centroids)
    labels = d2.argmin(axis=1)
    return centroids, labels, float(d2[np.arange(len(points)), labels].sum())


def kmeans(
    points,
    k: int,
    seed: int = 0,
    restarts: int = 10,
    max_iter: int = 300,
    tol: float = 1e-10,
    max_points: int | None = 50_000,
) -> KMeansResult:
    """Lowest-inertia clustering over ``restarts`` seeded k-means++ runs.

    Centroids are fitted on at most ``max_points`` rows (a seeded subsample);
    labels are then assigned for every row.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if k < 1:
        raise ValueError("k must be positive")
    distinct = len(np.unique(np.round(pts, 12), axis=0))
    if k > distinct:
        raise ValueError(f"k={k} exceeds the number of distinct points ({distinct})")
    rng = np.random.default_rng(seed)
    fit = pts
    if max_points is not None and len(pts) > max_points:
        fit = pts[rng.choice(len(pts), size=max_points, replace=False)]
    best = None
    for _ in range(restarts):
        c, _, inertia = _lloyd(fit, _plusplus(fit, k, rng), max_iter, tol)
        if best is None or inertia < best[1]:
            best = (c, inertia)
    centroids = best[0]
    # canonical order keeps labels reproducible across equivalent solutions
    order = np.lexsort(centroids.T[::-1])
    centroids = centroids[order]
    d2 = _sq_dist(pts, centroids)
    labels = d2.argmin(axis=1)
    return KMeansResult(centroids, labels, float(d2[np.arange(len(pts)), labels].sum()))
