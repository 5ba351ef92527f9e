"""Adaptation objectives.

Differentiable inputs (logits, query features) are ``Tensor`` objects; pseudo
labels, region masks, prototypes and keys are treated as constants.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from . import numerics as nx
from .clusterstat import ClusterStats
from .memory import KeyQueue
from .numerics import Tensor

log = logging.getLogger(__name__)


def _one_hot(labels, n_classes: int) -> np.ndarray:
    return np.eye(n_classes)[np.asarray(labels, dtype=np.int64)]


def soft_cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Per-row ``-sum_c t_c log softmax(logits)_c``."""
    return nx.scale(nx.sum(nx.mul(nx.log_softmax(logits), targets), axis=-1), -1.0)


def loss_clean_region(logits: Tensor, pseudo_labels, clean_mask) -> Tensor:
    """Mean pseudo-label cross-entropy over rows tagged clean; 0 when none are."""
    clean_mask = np.asarray(clean_mask, dtype=bool)
    n_clean = int(clean_mask.sum())
    if n_clean == 0:
        return Tensor(0.0)
    targets = _one_hot(pseudo_labels, logits.shape[1]) * clean_mask[:, None]
    return nx.scale(nx.sum(soft_cross_entropy(logits, targets)), 1.0 / n_clean)


@dataclass
class MixupBatch:
    index_i: np.ndarray
    index_j: np.ndarray
    lam: np.ndarray
    mixed_input: np.ndarray
    mixed_target: np.ndarray
    mixed_clean: np.ndarray
    weight: np.ndarray


def make_mixup(inputs: np.ndarray, pseudo_labels, clean_probs, n_classes: int,
               rng: np.random.Generator | None = None,
               lam: np.ndarray | float | None = None,
               partner: np.ndarray | None = None) -> MixupBatch:
    """Mix each row with a partner drawn by an in-batch permutation.

    ``lam`` defaults to one Uniform(0, 1) draw per row.  The mixed clean
    probability blends the two parents' clean probabilities with the same
    ratio and its exponential becomes the per-row loss weight.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    n = inputs.shape[0]
    if n < 2:
        raise ValueError("make_mixup: need a batch of at least 2")
    if partner is None:
        partner = rng.permutation(n)
    if lam is None:
        lam = rng.uniform(0.0, 1.0, n)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,)).copy()
    partner = np.asarray(partner, dtype=np.int64)
    clean_probs = np.asarray(clean_probs, dtype=np.float64)
    onehot = _one_hot(pseudo_labels, n_classes)
    lam_col = lam[:, None]
    mixed_input = lam_col * inputs + (1.0 - lam_col) * inputs[partner]
    mixed_target = lam_col * onehot + (1.0 - lam_col) * onehot[partner]
    mixed_clean = lam * clean_probs + (1.0 - lam) * clean_probs[partner]
    return MixupBatch(
        index_i=np.arange(n),
        index_j=partner,
        lam=lam,
        mixed_input=mixed_input,
        mixed_target=mixed_target,
        mixed_clean=mixed_clean,
        weight=np.exp(mixed_clean),
    )


def loss_ccp(mixed_logits: Tensor, mixup: MixupBatch) -> Tensor:
    """Mixup-weighted soft-label cross-entropy, weight applied per row."""
    per_row = soft_cross_entropy(mixed_logits, mixup.mixed_target)
    return nx.mean(nx.mul(per_row, mixup.weight))


def loss_div(logits: Tensor) -> Tensor:
    """Negative entropy of the batch-mean prediction."""
    p_bar = nx.mean(nx.softmax(logits), axis=0)
    return nx.sum(nx.mul(p_bar, nx.log(p_bar)))


def loss_prototype_contrast(queries: Tensor, pseudo_labels, stats: ClusterStats,
                            tau: float) -> Tensor:
    sims = nx.scale(nx.matmul(queries, stats.mu.T), 1.0 / tau)
    return nx.mean(soft_cross_entropy(sims, _one_hot(pseudo_labels, stats.n_classes)))


def negative_mask(neighbor_labels: np.ndarray, queue_labels: np.ndarray) -> np.ndarray:
    """``mask[i, j]`` is True when queue entry ``j`` may serve as a negative for query ``i``.

    ``neighbor_labels`` is a (B, C) boolean membership table of the labels
    each query wants excluded.
    """
    return ~neighbor_labels[:, queue_labels]


def loss_instance_contrast(queries: Tensor, keys: np.ndarray, key_queue: KeyQueue,
                           neighbor_labels: np.ndarray, tau: float) -> Tensor:
    """InfoNCE against the momentum key, with same-neighborhood-class negatives removed.

    The positive stays in the denominator.  Rows whose negative set is empty
    contribute exactly zero.
    """
    keys = np.asarray(keys, dtype=np.float64)
    # similarities are bounded by 1, so shifting by 1/tau keeps every exp <= 1
    shift = 1.0 / tau
    pos = nx.scale(nx.sum(nx.mul(queries, keys), axis=-1), 1.0 / tau)
    pos = nx.add(pos, -shift)
    denom = nx.exp(pos)
    if len(key_queue):
        mask = negative_mask(np.asarray(neighbor_labels, dtype=bool), key_queue.labels)
        empty = ~mask.any(axis=1)
        if empty.any():
            log.debug("instance contrast: %d rows without negatives", int(empty.sum()))
        if mask.any():
            neg = nx.add(nx.scale(nx.matmul(queries, key_queue.keys.T), 1.0 / tau), -shift)
            denom = nx.add(denom, nx.sum(nx.mul(nx.exp(neg), mask.astype(np.float64)), axis=-1))
    per_row = nx.add(nx.log(denom), nx.scale(pos, -1.0))
    return nx.mean(per_row)


@dataclass(frozen=True)
class LossWeights:
    cr: float = 1.0
    ccp: float = 1.0
    div: float = 1.0
    ctr: float = 1.0
    prt: bool = True
    inst: bool = True

    @classmethod
    def from_gammas(cls, gammas, prt: bool = True, inst: bool = True) -> LossWeights:
        g = [float(v) for v in gammas]
        if len(g) != 4:
            raise ValueError(f"expected four loss weights, got {len(g)}")
        return cls(g[0], g[1], g[2], g[3], prt, inst)


@dataclass
class LossReport:
    l_cr: float = 0.0
    l_ccp: float = 0.0
    l_div: float = 0.0
    l_prt: float = 0.0
    l_inst: float = 0.0
    l_ctr: float = 0.0
    total: float = 0.0
    n_clean: int = 0
    n_noisy: int = 0

    def row(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def loss_total(components: dict, weights: LossWeights, n_clean: int = 0,
               n_noisy: int = 0) -> tuple[Tensor, LossReport]:
    """Weighted sum of the component losses.

    ``components`` maps ``cr, ccp, div, prt, inst`` to Tensors or floats;
    missing entries count as zero.
    """
    def term(name):
        v = components.get(name, 0.0)
        return v if isinstance(v, Tensor) else Tensor(float(v))

    l_cr, l_ccp, l_div = term("cr"), term("ccp"), term("div")
    l_prt = term("prt") if weights.prt else Tensor(0.0)
    l_inst = term("inst") if weights.inst else Tensor(0.0)
    l_ctr = nx.add(l_prt, l_inst)
    total = nx.add(
        nx.add(nx.scale(l_cr, weights.cr), nx.scale(l_ccp, weights.ccp)),
        nx.add(nx.scale(l_div, weights.div), nx.scale(l_ctr, weights.ctr)),
    )
    report = LossReport(
        l_cr=l_cr.item(), l_ccp=l_ccp.item(), l_div=l_div.item(),
        l_prt=l_prt.item(), l_inst=l_inst.item(), l_ctr=l_ctr.item(),
        total=total.item(), n_clean=int(n_clean), n_noisy=int(n_noisy),
    )
    return total, report
