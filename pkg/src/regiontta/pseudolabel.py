"""Soft-voting pseudo-labels from the nearest stored neighbors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .memory import FeatureQueue, knn_batch


class ColdQueueError(ValueError):
    pass


@dataclass
class PseudoLabel:
    probs: np.ndarray
    label: np.ndarray | int


def soft_vote_batch(queries: np.ndarray, queue: FeatureQueue, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Average the stored probabilities of each query's ``k`` nearest entries.

    Returns ``(probs, labels)`` with labels taken as the argmax (lowest class
    index on ties, which is what ``np.argmax`` does).
    """
    if len(queue) < k:
        raise ColdQueueError(f"soft_vote: queue holds {len(queue)} entries, need k={k}")
    idx = knn_batch(queue.features, queries, k)
    probs = queue.probs[idx].mean(axis=1)
    return probs, probs.argmax(axis=1)


def soft_vote(query: np.ndarray, queue: FeatureQueue, k: int) -> PseudoLabel:
    probs, labels = soft_vote_batch(np.asarray(query)[None, :], queue, k)
    return PseudoLabel(probs=probs[0], label=int(labels[0]))
