import logging
import warnings
from typing import Optional

import numpy as np

from pyagcn.errors import ArgumentError

logger = logging.getLogger(__name__)


class KmeansResult:
    def __init__(self, centroids: np.ndarray, labels: np.ndarray, inertia: float):
        self.centroids = centroids
        self.labels = labels
        self.inertia = inertia
        self.n_iter = 0
        self.inertia_history = []

    def __repr__(self) -> str:
        return (
            f"KmeansResult(k={self.centroids.shape[0]}, inertia={self.inertia:.6g}, "
            f"n_iter={self.n_iter})"
        )


def squared_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    delta = x[:, None, :] - centroids[None, :, :]
    return (delta * delta).sum(axis=2)


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    chosen = [int(rng.integers(0, n))]
    closest = squared_distances(x, x[chosen]).min(axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = int(rng.choice(n, p=closest / total))
        else:
            # every point coincides with a centroid already
            idx = next(i for i in range(n) if i not in chosen)
        chosen.append(idx)
        closest = np.minimum(closest, squared_distances(x, x[[idx]])[:, 0])
    return x[chosen].copy()


def _update_centroids(
    x: np.ndarray, labels: np.ndarray, dist: np.ndarray, k: int
) -> np.ndarray:
    centroids = np.empty((k, x.shape[1]))
    own = dist[np.arange(x.shape[0]), labels]
    used = set()
    for j in range(k):
        members = labels == j
        if members.any():
            centroids[j] = x[members].mean(axis=0)
            continue
        # empty cluster: move it onto the worst-fit point
        for i in np.argsort(-own, kind="stable"):
            if int(i) not in used:
                used.add(int(i))
                centroids[j] = x[i]
                break
        warnings.warn(f"k-means cluster {j} became empty; re-seeded at point {i}")
    return centroids


def kmeans(
    x: np.ndarray,
    k: int,
    seed: int = 0,
    max_iters: int = 300,
    n_init: int = 1,
    init: Optional[np.ndarray] = None,
) -> KmeansResult:
    """Lloyd's algorithm from k-means++ seeds, stopping at an assignment fixpoint."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or k > n:
        raise ArgumentError(f"k must lie in [1, n={n}], got {k}")
    if max_iters < 1 or n_init < 1:
        raise ArgumentError("max_iters and n_init must be at least 1")
    rng = np.random.default_rng(seed)
    best: Optional[KmeansResult] = None
    for _ in range(n_init):
        centroids = kmeans_plusplus(x, k, rng) if init is None else np.array(init)
        result = _lloyd(x, centroids, max_iters)
        if best is None or result.inertia < best.inertia:
            best = result
    logger.debug("k-means finished: %r", best)
    return best


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iters: int) -> KmeansResult:
    k = centroids.shape[0]
    labels = None
    history = []
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        dist = squared_distances(x, centroids)
        new_labels = dist.argmin(axis=1)
        history.append(float(dist[np.arange(x.shape[0]), new_labels].sum()))
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        centroids = _update_centroids(x, labels, dist, k)
    dist = squared_distances(x, centroids)
    inertia = float(dist[np.arange(x.shape[0]), labels].sum())
    result = KmeansResult(centroids, labels, inertia)
    result.n_iter = n_iter
    result.inertia_history = history
    return result
