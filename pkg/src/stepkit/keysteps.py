"""Cluster-and-sample key-step extraction."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConfigError, DataError


@dataclass
class ExtractConfig:
    num_clusters: int = 7
    background_ratio: float = 0.1
    gamma_split: float = 2.0  # seconds
    clustering: str = "kmeans"
    seed: int = 0

    def validate(self) -> None:
        if self.num_clusters < 1:
            raise ConfigError(f"num_clusters must be >= 1, got {self.num_clusters}")
        if not 0.0 <= self.background_ratio < 1.0:
            raise ConfigError(f"background_ratio must be in [0, 1), got {self.background_ratio}")
        if not self.gamma_split > 0:
            raise ConfigError(f"gamma_split must be positive, got {self.gamma_split}")
        if self.clustering not in CLUSTERING:
            raise ConfigError(
                f"unknown clustering {self.clustering!r}; supported: {', '.join(sorted(CLUSTERING))}"
            )


@dataclass(frozen=True)
class KeyStep:
    frame: int
    time_s: float
    cluster: int
    distance: float


@dataclass
class KeyStepResult:
    steps: list[KeyStep]
    centers: np.ndarray

    def __len__(self):
        return len(self.steps)

    def to_json(self) -> list[dict]:
        return [
            {"frame": s.frame, "time_s": s.time_s, "cluster": s.cluster, "distance": s.distance}
            for s in self.steps
        ]


# -- clustering ------------------------------------------------------------


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((K, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = ((X - centers[0]) ** 2).sum(axis=1)
    for k in range(1, K):
        total = closest.sum()
        if total <= 0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers[k] = X[idx]
        closest = np.minimum(closest, ((X - centers[k]) ** 2).sum(axis=1))
    return centers


def _lloyd(X, centers, max_iter, tol):
    for _ in range(max_iter):
        d2 = _sq_dists(X, centers)
        labels = np.argmin(d2, axis=1)
        new = centers.copy()
        counts = np.bincount(labels, minlength=len(centers))
        for k in range(len(centers)):
            if counts[k]:
                new[k] = X[labels == k].mean(axis=0)
        empty = np.flatnonzero(counts == 0)
        if len(empty):
            # re-seed each empty center from the point farthest from its own center
            own = d2[np.arange(len(X)), labels]
            far = np.argsort(-own, kind="stable")
            for k, idx in zip(empty, far):
                new[k] = X[idx]
        shift = ((new - centers) ** 2).sum(axis=1).max()
        centers = new
        if shift <= tol and not len(empty):
            break
    d2 = _sq_dists(X, centers)
    labels = np.argmin(d2, axis=1)
    return centers, labels, float(d2[np.arange(len(X)), labels].sum())


def kmeans(X, K: int, seed: int = 0, n_init: int = 10, max_iter: int = 300, tol: float = 1e-6):
    """k-means++ seeding, ``n_init`` restarts, best inertia kept (earliest restart on ties)."""
    X = np.asarray(X, dtype=np.float64)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers, labels, inertia = _lloyd(X, _kmeans_pp(X, K, rng), max_iter, tol)
        if best is None or inertia < best[2]:
            best = (centers, labels, inertia)
    return best[0], best[1]


CLUSTERING: dict[str, Callable] = {"kmeans": kmeans}


def cluster_features(features, K: int, algorithm: str = "kmeans", seed: int = 0):
    """Returns ``(centers, assignments, distances)``; distance is to the assigned (nearest) center."""
    X = np.asarray(features, dtype=np.float64)
    if X.shape[0] < K:
        raise DataError(f"cannot form {K} clusters from {X.shape[0]} frames")
    if algorithm not in CLUSTERING:
        raise ConfigError(f"unknown clustering {algorithm!r}; supported: {', '.join(sorted(CLUSTERING))}")
    centers, _ = CLUSTERING[algorithm](X, K, seed=seed)
    d = np.sqrt(_sq_dists(X, centers))
    y = np.argmin(d, axis=1)
    return centers, y, d[np.arange(len(X)), y]


def background_reject(indices, distances, alpha: float) -> np.ndarray:
    """Drop the ceil(alpha * n) indices farthest from their center; ties drop the larger index."""
    idx = np.asarray(indices, dtype=np.int64)
    dist = np.asarray(distances, dtype=np.float64)
    n_drop = math.ceil(alpha * len(idx) - 1e-9) if alpha > 0 else 0
    if n_drop == 0:
        return np.sort(idx)
    order = np.lexsort((-idx, -dist))
    return np.sort(idx[order[n_drop:]])


def split_to_segments(indices, gamma_split: float, timestamps) -> list[np.ndarray]:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        return []
    ts = np.asarray(timestamps, dtype=np.float64)[idx]
    cuts = np.flatnonzero(np.diff(ts) > gamma_split) + 1
    return np.split(idx, cuts)


def extract_key_steps(features, timestamps, cfg: ExtractConfig) -> KeyStepResult:
    cfg.validate()
    ts = np.asarray(timestamps, dtype=np.float64)
    centers, y, d = cluster_features(features, cfg.num_clusters, cfg.clustering, cfg.seed)
    picks = []
    for k in range(cfg.num_clusters):
        members = np.flatnonzero(y == k)
        if members.size == 0:
            continue
        kept = background_reject(members, d[members], cfg.background_ratio)
        for seg in split_to_segments(kept, cfg.gamma_split, ts):
            best = seg[np.argmin(d[seg])]  # argmin returns the earliest on ties
            picks.append(KeyStep(int(best), float(ts[best]), k, float(d[best])))
    picks.sort(key=lambda s: (s.time_s, s.frame))
    return KeyStepResult(picks, centers)
