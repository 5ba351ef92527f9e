"""Fixed-capacity FIFO memories and exact cosine nearest-neighbor search."""

from __future__ import annotations

import numpy as np

UNIT_TOL = 1e-9


class FeatureQueue:
    """Weak-view features paired with the model's class probabilities.

    Entries are kept oldest first; index 0 is the oldest surviving entry.
    """

    def __init__(self, capacity: int, dim: int, n_classes: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.features = np.empty((0, dim))
        self.probs = np.empty((0, n_classes))

    def __len__(self):
        return self.features.shape[0]

    def push(self, features, probs) -> FeatureQueue:
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
        if features.shape[0] == 0:
            return self
        if features.shape[1:] != self.features.shape[1:] or probs.shape[1:] != self.probs.shape[1:]:
            raise ValueError(
                f"push: entry shapes {features.shape}/{probs.shape} do not match queue "
                f"({self.features.shape[1]}, {self.probs.shape[1]})"
            )
        if features.shape[0] != probs.shape[0]:
            raise ValueError("push: features and probs have different lengths")
        norms = np.linalg.norm(features, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_TOL):
            raise ValueError("push: features must be unit-norm")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=1) - 1.0) > UNIT_TOL):
            raise ValueError("push: probs rows must lie on the probability simplex")
        self.features = np.concatenate([self.features, features])[-self.capacity:]
        self.probs = np.concatenate([self.probs, probs])[-self.capacity:]
        return self


class KeyQueue:
    """Momentum-encoder keys with the pseudo-labels assigned when they were pushed.

    ``label_probs`` keeps the soft pseudo-label distribution alongside the hard
    label so cluster statistics can be refreshed without re-voting the queue.
    """

    def __init__(self, capacity: int, dim: int, n_classes: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.n_classes = n_classes
        self.keys = np.empty((0, dim))
        self.labels = np.empty(0, dtype=np.int64)
        self.label_probs = np.empty((0, n_classes))

    def __len__(self):
        return self.keys.shape[0]

    def push(self, keys, labels, label_probs=None) -> KeyQueue:
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        if keys.shape[0] == 0:
            return self
        if keys.shape[1:] != self.keys.shape[1:] or labels.shape[0] != keys.shape[0]:
            raise ValueError(f"push: malformed key entries {keys.shape}, {labels.shape}")
        if np.any(labels < 0) or np.any(labels >= self.n_classes):
            raise ValueError("push: pseudo-label out of range")
        if label_probs is None:
            label_probs = np.eye(self.n_classes)[labels]
        label_probs = np.atleast_2d(np.asarray(label_probs, dtype=np.float64))
        if label_probs.shape != (keys.shape[0], self.n_classes):
            raise ValueError(f"push: label_probs shape {label_probs.shape} does not match")
        if np.any(np.abs(np.linalg.norm(keys, axis=1) - 1.0) > UNIT_TOL):
            raise ValueError("push: keys must be unit-norm")
        self.keys = np.concatenate([self.keys, keys])[-self.capacity:]
        self.labels = np.concatenate([self.labels, labels])[-self.capacity:]
        self.label_probs = np.concatenate([self.label_probs, label_probs])[-self.capacity:]
        return self


def knn_batch(features: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` most similar rows per query, best first.

    Similarity is the plain dot product; equal similarities resolve toward
    the lower (older) index.
    """
    n = features.shape[0]
    if k < 1 or k > n:
        raise ValueError(f"knn: need 1 <= k <= queue length, got k={k}, length={n}")
    queries = np.atleast_2d(queries)
    sims = queries @ features.T
    if 4 * k >= n:
        return np.argsort(-sims, axis=1, kind="stable")[:, :k]
    kth = -np.partition(-sims, k - 1, axis=1)[:, k - 1]
    out = np.empty((sims.shape[0], k), dtype=np.int64)
    for r in range(sims.shape[0]):
        # every entry tied with the k-th value stays a candidate
        cand = np.flatnonzero(sims[r] >= kth[r])
        order = np.lexsort((cand, -sims[r, cand]))
        out[r] = cand[order[:k]]
    return out


def knn(queue: FeatureQueue, query: np.ndarray, k: int) -> np.ndarray:
    return knn_batch(queue.features, np.asarray(query)[None, :], k)[0]


def is_warm(queue, threshold: int) -> bool:
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    return len(queue) >= threshold
