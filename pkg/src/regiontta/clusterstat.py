"""Cluster prototypes/variances, clean probabilities and the clean/noisy split."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .numerics import softmax_np

log = logging.getLogger(__name__)

SIGMA_MIN = 1e-4
MIN_MASS = 1e-8


@dataclass
class ClusterStats:
    mu: np.ndarray  # (C, D), unit rows
    sigma: np.ndarray  # (C,)
    population: np.ndarray = field(default=None)  # hard-assignment counts
    fallback: tuple[int, ...] = ()  # classes whose stats were not re-estimated

    @property
    def n_classes(self) -> int:
        return self.mu.shape[0]


def compute_stats(features: np.ndarray, posteriors: np.ndarray,
                  previous: ClusterStats | None = None,
                  sigma_min: float = SIGMA_MIN) -> ClusterStats:
    """Posterior-weighted prototype and scalar spread per class.

    ``mu_k`` is the normalized weighted mean of ``features`` and ``sigma_k``
    the weighted mean squared distance to it, floored at ``sigma_min``.
    A class carrying less than 1e-8 total posterior mass keeps its previous
    statistics, or the all-ones direction with unit spread when there are
    none yet.
    """
    features = np.asarray(features, dtype=np.float64)
    posteriors = np.asarray(posteriors, dtype=np.float64)
    if features.shape[0] == 0:
        raise ValueError("compute_stats: empty batch")
    if posteriors.shape[0] != features.shape[0]:
        raise ValueError("compute_stats: features and posteriors differ in length")
    n_classes, dim = posteriors.shape[1], features.shape[1]
    mass = posteriors.sum(axis=0)
    weighted = posteriors.T @ features
    safe = np.where(mass >= MIN_MASS, mass, 1.0)
    centers = weighted / safe[:, None]
    norms = np.linalg.norm(centers, axis=1, keepdims=True)
    mu = centers / np.maximum(norms, 1e-12)
    # ||g - mu||^2 expanded; exact enough for unit rows and avoids an (N, C, D) tensor
    sq = (features**2).sum(axis=1)[:, None] - 2.0 * features @ mu.T + (mu**2).sum(axis=1)[None, :]
    sq = np.maximum(sq, 0.0)
    sigma = np.maximum((posteriors * sq).sum(axis=0) / safe, sigma_min)

    degenerate = np.flatnonzero((mass < MIN_MASS) | (norms[:, 0] < 1e-12))
    for k in degenerate:
        if previous is not None:
            mu[k], sigma[k] = previous.mu[k], previous.sigma[k]
        else:
            mu[k], sigma[k] = np.ones(dim) / np.sqrt(dim), 1.0
    if degenerate.size:
        log.info("compute_stats: classes %s lack posterior mass; kept fallback stats",
                 degenerate.tolist())
    population = np.bincount(posteriors.argmax(axis=1), minlength=n_classes)
    return ClusterStats(mu=mu, sigma=sigma, population=population,
                        fallback=tuple(int(k) for k in degenerate))


@dataclass
class CleanProbability:
    gamma: np.ndarray  # (B, C) responsibilities
    clean: np.ndarray  # (B,) responsibility of the assigned cluster


def responsibilities(features: np.ndarray, stats: ClusterStats) -> np.ndarray:
    """``softmax_k(g . mu_k / sigma_k)`` for each row of ``features``."""
    return softmax_np(np.atleast_2d(features) @ stats.mu.T / stats.sigma[None, :])


def clean_probability(features: np.ndarray, labels, stats: ClusterStats) -> CleanProbability:
    features = np.atleast_2d(features)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if np.any(labels < 0) or np.any(labels >= stats.n_classes):
        raise ValueError("clean_probability: label out of range")
    gamma = responsibilities(features, stats)
    return CleanProbability(gamma=gamma, clean=gamma[np.arange(len(labels)), labels])


class RegionTag(str, Enum):
    CLEAN = "clean"
    NOISY = "noisy"


def partition(clean, alpha: float):
    """Clean iff ``clean >= alpha``.  Scalars give a RegionTag, arrays a bool mask."""
    if np.ndim(clean) == 0:
        return RegionTag.CLEAN if clean >= alpha else RegionTag.NOISY
    return np.asarray(clean) >= alpha
