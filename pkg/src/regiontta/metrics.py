"""Accuracy, calibration and clean/noisy detection scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def accuracy(predictions, labels) -> tuple[float, float]:
    """Overall accuracy and the mean of per-class accuracies.

    Classes that never occur in ``labels`` are left out of the average.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0:
        raise ValueError("accuracy: empty input")
    if predictions.shape != labels.shape:
        raise ValueError("accuracy: predictions and labels differ in length")
    correct = predictions == labels
    per_class = [correct[labels == c].mean() for c in np.unique(labels)]
    return float(correct.mean()), float(np.mean(per_class))


@dataclass
class ReliabilityTable:
    edges: np.ndarray
    count: np.ndarray
    confidence: np.ndarray  # mean confidence per bin, nan where empty
    accuracy: np.ndarray  # mean accuracy per bin, nan where empty

    def rows(self) -> list[dict]:
        return [
            {"lo": float(self.edges[b]), "hi": float(self.edges[b + 1]),
             "count": int(self.count[b]), "confidence": float(self.confidence[b]),
             "accuracy": float(self.accuracy[b])}
            for b in range(len(self.count))
        ]


def calibration(confidences, correct, bins: int = 10) -> tuple[ReliabilityTable, float, float]:
    """Reliability table plus ECE and MCE over left-open, right-closed bins."""
    conf = np.asarray(confidences, dtype=np.float64).reshape(-1)
    hit = np.asarray(correct, dtype=np.float64).reshape(-1)
    if conf.shape != hit.shape:
        raise ValueError("calibration: confidences and correct flags differ in length")
    if conf.size and (conf.min() <= 0.0 or conf.max() > 1.0):
        raise ValueError("calibration: confidences must lie in (0, 1]")
    edges = np.linspace(0.0, 1.0, bins + 1)
    which = np.searchsorted(edges, conf, side="left") - 1
    count = np.bincount(which, minlength=bins)
    conf_sum = np.bincount(which, weights=conf, minlength=bins)
    hit_sum = np.bincount(which, weights=hit, minlength=bins)
    nonempty = count > 0
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(nonempty, conf_sum / count, np.nan)
        mean_acc = np.where(nonempty, hit_sum / count, np.nan)
    gaps = np.abs(mean_acc[nonempty] - mean_conf[nonempty])
    n = conf.size
    ece = float((count[nonempty] * gaps).sum() / n) if n else 0.0
    mce = float(gaps.max()) if gaps.size else 0.0
    return ReliabilityTable(edges, count, mean_conf, mean_acc), ece, mce


@dataclass
class NoiseDetectionScores:
    accuracy: float | None
    recall: float | None
    precision: float | None


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def noise_detection(clean_tags, pseudo_labels, true_labels) -> NoiseDetectionScores:
    """Score the clean/noisy split with "clean" as the positive class.

    A sample is truly clean when its pseudo-label equals its true label.
    """
    pred = np.asarray(clean_tags, dtype=bool)
    truth = np.asarray(pseudo_labels) == np.asarray(true_labels)
    tp = int(np.sum(pred & truth))
    tn = int(np.sum(~pred & ~truth))
    return NoiseDetectionScores(
        accuracy=_ratio(tp + tn, pred.size),
        recall=_ratio(tp, int(truth.sum())),
        precision=_ratio(tp, int(pred.sum())),
    )


def evaluate_probs(probs: np.ndarray, labels: np.ndarray) -> dict:
    """Accuracy and calibration summary for a matrix of class probabilities."""
    pred = probs.argmax(axis=1)
    overall, per_class = accuracy(pred, labels)
    _, ece, mce = calibration(probs.max(axis=1), pred == labels)
    return {"overall_acc": overall, "per_class_acc": per_class, "ece": ece, "mce": mce}
