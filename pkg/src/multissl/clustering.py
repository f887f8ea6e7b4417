"""Multi-modal fusion and online K-means over a rolling batch queue.

Fused embeddings are the rowwise mean of the three modality embeddings.
Centroids are refit once per training step with warm-started Lloyd
iterations over the queue snapshot; assignments use squared Euclidean
distance with ties broken toward the lowest centroid index. Distance and
mean arithmetic run in float64 so inertia is monotone under Lloyd steps.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ShapeError

DEFAULT_CLUSTERS = 8
DEFAULT_QUEUE_BATCHES = 4


def fuse_multimodal(cluster_embeddings: dict) -> Tensor:
    """Rowwise mean of the per-modality clustering embeddings."""
    if len(cluster_embeddings) == 0:
        raise ContractError("fuse_multimodal needs at least one modality")
    tensors = []
    for m in sorted(cluster_embeddings):
        t = cluster_embeddings[m]
        tensors.append(t if isinstance(t, Tensor) else Tensor.leaf(t))
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise ShapeError(f"fuse_multimodal needs equal shapes, got {sorted(shapes)}")
    total = tensors[0]
    for t in tensors[1:]:
        total = ad.add(total, t)
    return ad.scale(total, 1.0 / len(tensors))


@dataclass
class CentroidSet:
    """K-means state: centroid matrix plus the objective value at last fit."""

    centroids: np.ndarray    # float32 [k x dim]
    inertia: float
    inertia_history: list | None = None   # objective after init and each iteration

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


def _sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # (x - c)^2 expanded; clamped at 0 against cancellation.
    cross = points @ centroids.T
    p2 = np.sum(points * points, axis=1, keepdims=True)
    c2 = np.sum(centroids * centroids, axis=1)
    return np.maximum(p2 - 2.0 * cross + c2, 0.0)


def assign(points, centroids) -> np.ndarray:
    """Index of the nearest centroid per point (squared Euclidean,
    ties broken toward the lowest index)."""
    pts = np.asarray(points, dtype=np.float64)
    cen = np.asarray(centroids, dtype=np.float64)
    if pts.ndim != 2 or cen.ndim != 2 or pts.shape[1] != cen.shape[1]:
        raise ShapeError(f"assign: incompatible shapes {pts.shape} and {cen.shape}")
    return np.argmin(_sq_distances(pts, cen), axis=1)


def _kmeanspp_init(points: np.ndarray, k: int, rng) -> np.ndarray:
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(0, n))
    centroids[0] = points[first]
    closest = _sq_distances(points, centroids[:1]).ravel()
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            idx = int(rng.integers(0, n))
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(closest), r))
            idx = min(idx, n - 1)
        centroids[j] = points[idx]
        closest = np.minimum(closest, _sq_distances(points, centroids[j:j + 1]).ravel())
    return centroids


def kmeans_fit(points, k: int, init="kmeanspp", max_iters: int = 10,
               tol: float = 1e-4, seed: int = 0):
    """Lloyd iterations minimizing within-cluster squared distances.

    ``init`` is either the string ``"kmeanspp"`` or a previous centroid
    matrix / CentroidSet to warm-start from. Empty clusters are reseeded
    from the point farthest from its assigned centroid, which keeps the
    objective non-increasing. Returns ``(CentroidSet, assignments)``.
    """
    pts = np.ascontiguousarray(np.asarray(points, dtype=np.float64))
    if pts.ndim != 2:
        raise ContractError(f"kmeans_fit needs an [N x d] matrix, got shape {pts.shape}")
    n = pts.shape[0]
    if k < 1:
        raise ContractError(f"k must be positive, got {k}")
    if n < k:
        raise ContractError(f"kmeans_fit needs at least k={k} points, got {n}")

    if isinstance(init, str):
        if init != "kmeanspp":
            raise ContractError(f"unknown init '{init}'")
        rng = np.random.default_rng([int(seed), 0x4B])
        centroids = _kmeanspp_init(pts, k, rng)
    else:
        prev = init.centroids if isinstance(init, CentroidSet) else init
        centroids = np.asarray(prev, dtype=np.float64).copy()
        if centroids.shape != (k, pts.shape[1]):
            raise ShapeError(f"warm-start centroids have shape {centroids.shape}, "
                             f"expected {(k, pts.shape[1])}")

    labels = assign(pts, centroids)
    prev_inertia = float(_sq_distances(pts, centroids)[np.arange(n), labels].sum())
    history = [prev_inertia]
    for _ in range(max_iters):
        new_centroids = centroids.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new_centroids[j] = pts[members].mean(axis=0)
        # reseed empty clusters from the globally farthest point
        dists = _sq_distances(pts, new_centroids)
        for j in range(k):
            if not (labels == j).any():
                farthest = int(np.argmax(dists[np.arange(n), assign(pts, new_centroids)]))
                new_centroids[j] = pts[farthest]
                dists = _sq_distances(pts, new_centroids)
        centroids = new_centroids
        labels = assign(pts, centroids)
        inertia = float(_sq_distances(pts, centroids)[np.arange(n), labels].sum())
        if inertia > prev_inertia + 1e-9 * max(1.0, prev_inertia):
            raise AssertionError("Lloyd iteration increased inertia "
                                 f"({prev_inertia} -> {inertia})")
        history.append(inertia)
        improved = prev_inertia - inertia
        prev_inertia = inertia
        if improved < tol:
            break

    return (CentroidSet(centroids=centroids.astype(np.float32), inertia=prev_inertia,
                        inertia_history=history),
            labels)


class ClusterQueue:
    """FIFO of the most recent fused-embedding batches."""

    def __init__(self, capacity_batches: int = DEFAULT_QUEUE_BATCHES):
        if capacity_batches < 1:
            raise ContractError(f"capacity must be positive, got {capacity_batches}")
        self.capacity_batches = int(capacity_batches)
        self._buffer: deque = deque(maxlen=self.capacity_batches)
        self._dim: int | None = None

    def push(self, batch) -> "ClusterQueue":
        arr = np.asarray(batch, dtype=np.float32)
        if arr.ndim != 2:
            raise ShapeError(f"queue batches must be [B x d], got shape {arr.shape}")
        if self._dim is None:
            self._dim = arr.shape[1]
        elif arr.shape[1] != self._dim:
            raise ShapeError(f"queue dim {self._dim} != batch dim {arr.shape[1]}")
        self._buffer.append(arr.copy())
        return self

    def snapshot(self) -> np.ndarray:
        """Retained batches concatenated oldest-first; empty matrix if unused."""
        if not self._buffer:
            return np.zeros((0, self._dim or 0), dtype=np.float32)
        return np.concatenate(list(self._buffer), axis=0)

    def state(self) -> list:
        return [b.copy() for b in self._buffer]

    def load_state(self, batches) -> None:
        self._buffer.clear()
        self._dim = None
        for b in batches:
            self.push(b)

    def __len__(self) -> int:
        return len(self._buffer)
