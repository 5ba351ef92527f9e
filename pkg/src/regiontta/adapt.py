"""Source training, the SGD optimizer and the offline/online adaptation loops."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import numerics as nx
from .clusterstat import ClusterStats, clean_probability, compute_stats, partition
from .data import LabeledSet, UnlabeledView
from .losses import (
    LossReport,
    LossWeights,
    MixupBatch,
    loss_ccp,
    loss_clean_region,
    loss_div,
    loss_instance_contrast,
    loss_prototype_contrast,
    loss_total,
    make_mixup,
    soft_cross_entropy,
)
from .memory import FeatureQueue, KeyQueue, is_warm, knn_batch
from .metrics import evaluate_probs, noise_detection
from .model import (
    AugmentationKind,
    AugmentConfig,
    ModelConfig,
    ModelParams,
    augment,
    ema_update,
    forward_features,
    forward_logits,
    predict_proba,
)
from .pseudolabel import soft_vote_batch

log = logging.getLogger(__name__)

# independent generator streams derived from the single run seed
STREAM_INIT, STREAM_SOURCE, STREAM_ADAPT, STREAM_SHUFFLE = 0, 1, 2, 3


def stream(seed: int, which: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), which])


@dataclass(frozen=True)
class AdaptConfig:
    alpha: float = 0.5
    tau: float = 0.07
    memory_capacity: int = 16384
    k_vote: int = 3
    n_exclude: int = 10
    learning_rate: float = 2e-4
    sgd_momentum: float = 0.9
    ema_momentum: float = 0.999
    gammas: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)
    use_prt: bool = True
    use_inst: bool = True
    batch_size: int = 8
    epochs: int = 15
    warm_threshold: int = 1024
    mode: str = "offline"
    seed: int = 0
    shuffle: bool = True
    feature_source: str = "live"  # which model fills the feature queue
    posterior_source: str = "vote"  # posteriors for prototype estimation
    cr_view: str = "strong"  # view trained by the clean-region loss
    sigma_weak: float = 0.05
    sigma_strong: float = 0.2
    mask_frac: float = 0.25
    sigma_min: float = 1e-4

    def validate(self) -> None:
        checks = [
            (self.alpha >= 0.0, "alpha must be >= 0"),
            (self.tau > 0, "tau must be > 0"),
            (self.memory_capacity >= 1, "memory_capacity must be >= 1"),
            (self.k_vote >= 1, "k_vote must be >= 1"),
            (self.n_exclude >= 0, "n_exclude must be >= 0"),
            (self.learning_rate >= 0, "learning_rate must be >= 0"),
            (0.0 <= self.sgd_momentum < 1.0, "sgd_momentum must lie in [0, 1)"),
            (0.0 <= self.ema_momentum <= 1.0, "ema_momentum must lie in [0, 1]"),
            (len(self.gammas) == 4, "gammas needs four entries"),
            (self.batch_size >= 2, "batch_size must be >= 2"),
            (self.epochs >= 0, "epochs must be >= 0"),
            (1 <= self.warm_threshold <= self.memory_capacity,
             "warm_threshold must lie in [1, memory_capacity]"),
            (self.mode in ("offline", "online"), "mode must be offline or online"),
            (self.feature_source in ("live", "momentum"), "feature_source must be live or momentum"),
            (self.posterior_source in ("vote", "model"), "posterior_source must be vote or model"),
            (self.cr_view in ("strong", "weak"), "cr_view must be strong or weak"),
            (self.sigma_min > 0, "sigma_min must be > 0"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(f"invalid AdaptConfig: {msg}")

    @property
    def weights(self) -> LossWeights:
        return LossWeights.from_gammas(self.gammas, prt=self.use_prt, inst=self.use_inst)

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.sigma_weak, self.sigma_strong, self.mask_frac)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: ModelParams) -> OptimizerState:
        return cls({k: np.zeros_like(v) for k, v in params.arrays().items()})


def sgd_step(params: ModelParams, grads: dict[str, np.ndarray], state: OptimizerState,
             lr: float, momentum: float) -> tuple[ModelParams, OptimizerState, bool]:
    """Heavy-ball SGD: ``v = momentum * v + g``, ``theta -= lr * v``.

    A step with any non-finite gradient is skipped and reported as not applied.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            log.warning("sgd_step: non-finite gradient for %s; step skipped", name)
            return params, state, False
    new_params, new_vel = {}, {}
    for name, theta in params.arrays().items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if g.shape != theta.shape:
            raise ValueError(f"sgd_step: gradient shape {g.shape} != parameter {theta.shape}")
        v = momentum * state.velocity[name] + g
        new_vel[name] = v
        new_params[name] = theta - lr * v
    return ModelParams(**new_params), OptimizerState(new_vel), True


def gradients(loss: nx.Tensor, tensors: dict[str, nx.Tensor]) -> dict[str, np.ndarray]:
    nx.backward(loss)
    return {k: (np.zeros_like(t.value) if t.grad is None else t.grad) for k, t in tensors.items()}


def batches(n: int, batch_size: int, order: np.ndarray | None = None) -> list[np.ndarray]:
    """Contiguous chunks of ``order``; a trailing singleton joins the previous chunk."""
    order = np.arange(n) if order is None else order
    chunks = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        tail = chunks.pop()
        chunks[-1] = np.concatenate([chunks[-1], tail])
    return chunks


# ---------------------------------------------------------------------------
# source training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SourceConfig:
    epochs: int = 20
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 64
    label_smoothing: float = 0.1


def train_source(data: LabeledSet, model_cfg: ModelConfig, cfg: SourceConfig = SourceConfig(),
                 seed: int = 0) -> tuple[ModelParams, list[dict]]:
    """Fit encoder and classifier with label-smoothed cross-entropy."""
    if len(data) == 0:
        raise ValueError("train_source: empty dataset")
    if data.labels.min() < 0 or data.labels.max() >= model_cfg.n_classes:
        raise ValueError("train_source: labels must lie in [0, n_classes)")
    missing = sorted(set(range(model_cfg.n_classes)) - set(np.unique(data.labels).tolist()))
    if missing:
        log.warning("train_source: classes %s absent from the source data", missing)
    if data.dim != model_cfg.d_in:
        raise ValueError(f"train_source: data width {data.dim} != d_in {model_cfg.d_in}")

    params = ModelParams.init(model_cfg, stream(seed, STREAM_INIT))
    state = OptimizerState.zeros_like(params)
    rng = stream(seed, STREAM_SOURCE)
    C, eps = model_cfg.n_classes, cfg.label_smoothing
    smooth = np.eye(C)[data.labels] * (1.0 - eps) + eps / C
    history = []
    for epoch in range(cfg.epochs):
        total, seen = 0.0, 0
        for idx in batches(len(data), cfg.batch_size, rng.permutation(len(data))):
            tensors = params.tensors()
            z = forward_features(tensors, data.inputs[idx])
            logits = forward_logits(tensors, z, model_cfg.tau_cls)
            loss = nx.mean(soft_cross_entropy(logits, smooth[idx]))
            params, state, _ = sgd_step(params, gradients(loss, tensors), state, cfg.lr, cfg.momentum)
            total += loss.item() * len(idx)
            seen += len(idx)
        probs = predict_proba(params, data.inputs, model_cfg.tau_cls)
        acc = float((probs.argmax(axis=1) == data.labels).mean())
        history.append({"epoch": epoch + 1, "loss": total / seen, "train_acc": acc})
    return params, history


# ---------------------------------------------------------------------------
# one adaptation iteration
# ---------------------------------------------------------------------------


@dataclass
class AdaptState:
    params: ModelParams
    momentum: ModelParams
    optimizer: OptimizerState
    features: FeatureQueue
    keys: KeyQueue
    stats: ClusterStats | None = None
    voting: bool = False
    voting_since: int | None = None
    iteration: int = 0

    @classmethod
    def start(cls, params: ModelParams, model_cfg: ModelConfig, cfg: AdaptConfig) -> AdaptState:
        return cls(
            params=params.copy(),
            momentum=params.copy(),
            optimizer=OptimizerState.zeros_like(params),
            features=FeatureQueue(cfg.memory_capacity, model_cfg.d_feat, model_cfg.n_classes),
            keys=KeyQueue(cfg.memory_capacity, model_cfg.d_feat, model_cfg.n_classes),
        )


@dataclass
class StepInputs:
    """Everything one objective evaluation needs besides the live parameters."""

    strong: np.ndarray
    weak: np.ndarray
    pseudo_labels: np.ndarray
    clean_mask: np.ndarray
    mixup: MixupBatch
    stats: ClusterStats
    keys: np.ndarray
    key_queue: KeyQueue
    neighbor_labels: np.ndarray  # (B, C) bool
    tau: float
    tau_cls: float
    cr_view: str = "strong"


def step_objective(tensors: dict, batch: StepInputs, weights: LossWeights):
    """Build the weighted total loss on the live parameters ``tensors``."""
    comps = {}
    q = logits_s = None
    if weights.cr or weights.div or (weights.ctr and weights.prt) or (weights.ctr and weights.inst):
        q = forward_features(tensors, batch.strong)
        logits_s = forward_logits(tensors, q, batch.tau_cls)
    if weights.cr:
        if batch.cr_view == "weak":
            z_w = forward_features(tensors, batch.weak)
            logits_cr = forward_logits(tensors, z_w, batch.tau_cls)
        else:
            logits_cr = logits_s
        comps["cr"] = loss_clean_region(logits_cr, batch.pseudo_labels, batch.clean_mask)
    if weights.ccp:
        z_mix = forward_features(tensors, batch.mixup.mixed_input)
        comps["ccp"] = loss_ccp(forward_logits(tensors, z_mix, batch.tau_cls), batch.mixup)
    if weights.div:
        comps["div"] = loss_div(logits_s)
    if weights.ctr and weights.prt:
        comps["prt"] = loss_prototype_contrast(q, batch.pseudo_labels, batch.stats, batch.tau)
    if weights.ctr and weights.inst:
        comps["inst"] = loss_instance_contrast(q, batch.keys, batch.key_queue,
                                               batch.neighbor_labels, batch.tau)
    n_clean = int(batch.clean_mask.sum())
    return loss_total(comps, weights, n_clean, batch.clean_mask.size - n_clean)


@dataclass
class StepResult:
    report: LossReport
    pseudo_labels: np.ndarray
    pseudo_probs: np.ndarray
    clean: np.ndarray
    clean_mask: np.ndarray
    voted: bool
    applied: bool


def _neighbor_label_table(state: AdaptState, queries: np.ndarray, own: np.ndarray,
                          n: int, n_classes: int) -> np.ndarray:
    """Labels to exclude from each query's negatives: its own plus its neighbors'."""
    table = np.zeros((queries.shape[0], n_classes), dtype=bool)
    table[np.arange(len(own)), own] = True
    n = min(n, len(state.features))
    if n > 0:
        idx = knn_batch(state.features.features, queries, n)
        rows = np.repeat(np.arange(queries.shape[0]), n)
        table[rows, state.keys.labels[idx].reshape(-1)] = True
    return table


def adapt_step(state: AdaptState, x: np.ndarray, cfg: AdaptConfig, model_cfg: ModelConfig,
               rng: np.random.Generator) -> StepResult:
    """Run one iteration in place on ``state`` and return its diagnostics."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        raise ValueError("adapt_step: empty batch")
    C, tau_cls, aug = model_cfg.n_classes, model_cfg.tau_cls, cfg.augment

    # (1) views
    x_weak = augment(x, AugmentationKind.WEAK, rng, aug)
    x_strong = augment(x, AugmentationKind.STRONG, rng, aug)
    x_alt = augment(x, AugmentationKind.STRONG_ALT, rng, aug)

    # (2) weak-view features and probabilities
    src = state.params if cfg.feature_source == "live" else state.momentum
    w = forward_features(src, x_weak)
    p = nx.softmax(forward_logits(src, w, tau_cls)).value
    w = w.value

    # (3) pseudo-labels; the gate latches open
    if not state.voting and is_warm(state.features, cfg.warm_threshold) \
            and len(state.features) >= cfg.k_vote:
        state.voting, state.voting_since = True, state.iteration
    if state.voting:
        p_hat, y_hat = soft_vote_batch(w, state.features, cfg.k_vote)
    else:
        p_hat, y_hat = p, p.argmax(axis=1)

    # (4) cluster statistics over the queue plus this batch
    if cfg.posterior_source == "vote":
        post = np.concatenate([state.keys.label_probs, p_hat])
    else:
        post = np.concatenate([state.features.probs, p])
    feats = np.concatenate([state.features.features, w])
    state.stats = compute_stats(feats, post, previous=state.stats, sigma_min=cfg.sigma_min)

    # (5) clean probabilities and the region split
    clean = clean_probability(w, y_hat, state.stats).clean
    clean_mask = partition(clean, cfg.alpha)

    # (6) mixup
    mix = make_mixup(x, y_hat, clean, C, rng)

    # (7) objectives
    keys = forward_features(state.momentum, x_alt).value
    neighbors = _neighbor_label_table(state, w, y_hat, cfg.n_exclude, C)
    batch = StepInputs(
        strong=x_strong, weak=x_weak, pseudo_labels=y_hat, clean_mask=clean_mask, mixup=mix,
        stats=state.stats, keys=keys, key_queue=state.keys, neighbor_labels=neighbors,
        tau=cfg.tau, tau_cls=tau_cls, cr_view=cfg.cr_view,
    )
    tensors = state.params.tensors()
    total, report = step_objective(tensors, batch, cfg.weights)

    # (8) update the live model only
    grads = gradients(total, tensors)
    state.params, state.optimizer, applied = sgd_step(
        state.params, grads, state.optimizer, cfg.learning_rate, cfg.sgd_momentum)

    # (9) momentum model
    state.momentum = ema_update(state.params, state.momentum, cfg.ema_momentum)

    # (10) memories
    state.features.push(w, p)
    state.keys.push(keys, y_hat, p_hat)
    state.iteration += 1
    return StepResult(report, y_hat, p_hat, clean, clean_mask, state.voting, applied)


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------


@dataclass
class AdaptResult:
    params: ModelParams
    momentum: ModelParams
    source_metrics: dict
    metrics: list[dict] = field(default_factory=list)
    losses: list[dict] = field(default_factory=list)
    regions: list[dict] = field(default_factory=list)
    stats: list[dict] = field(default_factory=list)
    voting_since: int | None = None
    predictions: np.ndarray | None = None  # online: first-pass predictions in stream order
    final_metrics: dict = field(default_factory=dict)
    trajectory: list[np.ndarray] = field(default_factory=list)
    region_log: dict = field(default_factory=dict)


def _noise_row(tags, pseudo, truth) -> dict:
    s = noise_detection(tags, pseudo, truth)
    return {"noise_acc": s.accuracy, "noise_recall": s.recall, "noise_precision": s.precision}


def _stats_rows(iteration: int, stats: ClusterStats, labels: np.ndarray, mask: np.ndarray) -> list[dict]:
    rows = []
    for k in range(stats.n_classes):
        sel = labels == k
        rows.append({
            "iteration": iteration, "k": k, "sigma": float(stats.sigma[k]),
            "population": int(stats.population[k]),
            "clean_fraction": float(mask[sel].mean()) if sel.any() else None,
        })
    return rows


def _record_step(result: AdaptResult, it: int, step: StepResult, truth: np.ndarray,
                 state: AdaptState, keep_stats: bool) -> None:
    result.losses.append({"iteration": it, **step.report.row()})
    result.regions.append({
        "iteration": it, "n_clean": step.report.n_clean, "n_noisy": step.report.n_noisy,
        "voting": int(step.voted), **_noise_row(step.clean_mask, step.pseudo_labels, truth),
    })
    if keep_stats:
        result.stats.extend(_stats_rows(it, state.stats, step.pseudo_labels, step.clean_mask))


def _evaluate(params: ModelParams, target: LabeledSet, model_cfg: ModelConfig) -> dict:
    return evaluate_probs(predict_proba(params, target.inputs, model_cfg.tau_cls), target.labels)


def adapt_offline(params: ModelParams, target: LabeledSet, cfg: AdaptConfig,
                  model_cfg: ModelConfig, keep_stats: bool = False,
                  keep_trajectory: bool = False,
                  on_epoch: Callable[[dict], None] | None = None) -> AdaptResult:
    """Multi-epoch adaptation; one metrics row per epoch.

    Adaptation only receives ``target.unlabeled()``; labels are used for the
    per-epoch evaluation and the noise-detection scores.
    """
    cfg.validate()
    view: UnlabeledView = target.unlabeled()
    state = AdaptState.start(params, model_cfg, cfg)
    rng, shuffler = stream(cfg.seed, STREAM_ADAPT), stream(cfg.seed, STREAM_SHUFFLE)
    result = AdaptResult(params=state.params, momentum=state.momentum,
                         source_metrics=_evaluate(params, target, model_cfg))
    if keep_trajectory:
        result.trajectory.append(state.params.flat())
    for epoch in range(cfg.epochs):
        order = shuffler.permutation(len(view)) if cfg.shuffle else np.arange(len(view))
        tags, pseudo, truth = [], [], []
        for idx in batches(len(view), cfg.batch_size, order):
            it = state.iteration
            step = adapt_step(state, view.inputs[idx], cfg, model_cfg, rng)
            _record_step(result, it, step, target.labels[idx], state, keep_stats)
            tags.append(step.clean_mask)
            pseudo.append(step.pseudo_labels)
            truth.append(target.labels[idx])
            if keep_trajectory:
                result.trajectory.append(state.params.flat())
        row = {"epoch": epoch + 1, "iteration": state.iteration,
               **_evaluate(state.params, target, model_cfg),
               **_noise_row(np.concatenate(tags), np.concatenate(pseudo), np.concatenate(truth))}
        result.metrics.append(row)
        if on_epoch:
            on_epoch(row)
    result.params, result.momentum = state.params, state.momentum
    result.voting_since = state.voting_since
    result.final_metrics = _evaluate(state.params, target, model_cfg)
    return result


def adapt_online(params: ModelParams, stream_data: LabeledSet, cfg: AdaptConfig,
                 model_cfg: ModelConfig, keep_stats: bool = False,
                 keep_trajectory: bool = False, post_update: bool = False) -> AdaptResult:
    """Single pass: each batch is scored before the model adapts on it.

    With ``post_update`` the batch is also re-scored after its update and the
    result is reported in separate columns.
    """
    cfg.validate()
    view = stream_data.unlabeled()
    state = AdaptState.start(params, model_cfg, cfg)
    rng = stream(cfg.seed, STREAM_ADAPT)
    result = AdaptResult(params=state.params, momentum=state.momentum,
                         source_metrics=_evaluate(params, stream_data, model_cfg))
    if keep_trajectory:
        result.trajectory.append(state.params.flat())
    first_pass = np.empty((len(view), model_cfg.n_classes))
    after = np.empty_like(first_pass) if post_update else None
    seen = 0
    for idx in batches(len(view), cfg.batch_size):
        it = state.iteration
        probs = predict_proba(state.params, view.inputs[idx], model_cfg.tau_cls)
        first_pass[idx] = probs
        step = adapt_step(state, view.inputs[idx], cfg, model_cfg, rng)
        truth = stream_data.labels[idx]
        _record_step(result, it, step, truth, state, keep_stats)
        if keep_trajectory:
            result.trajectory.append(state.params.flat())
        seen += len(idx)
        pred = probs.argmax(axis=1)
        row = {"iteration": it, "batch_acc": float((pred == truth).mean()),
               **evaluate_probs(first_pass[:seen], stream_data.labels[:seen]),
               "voting": int(step.voted),
               **_noise_row(step.clean_mask, step.pseudo_labels, truth)}
        if post_update:
            after[idx] = predict_proba(state.params, view.inputs[idx], model_cfg.tau_cls)
            row["post_batch_acc"] = float((after[idx].argmax(axis=1) == truth).mean())
        result.metrics.append(row)
    result.params, result.momentum = state.params, state.momentum
    result.voting_since = state.voting_since
    result.predictions = first_pass.argmax(axis=1)
    result.final_metrics = evaluate_probs(first_pass, stream_data.labels)
    if post_update:
        result.final_metrics["post_update_acc"] = float(
            (after.argmax(axis=1) == stream_data.labels).mean())
    result.final_metrics["adapted_overall_acc"] = _evaluate(
        state.params, stream_data, model_cfg)["overall_acc"]
    return result


def run_adaptation(params: ModelParams, target: LabeledSet, cfg: AdaptConfig,
                   model_cfg: ModelConfig, **kw) -> AdaptResult:
    if cfg.mode == "online":
        return adapt_online(params, target, cfg, model_cfg, **kw)
    kw.pop("post_update", None)
    return adapt_offline(params, target, cfg, model_cfg, **kw)


def config_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

