"""Next-token and classification metrics.

Next-token metrics iterate one shared prediction mask per song: the first
syllable (the token right after bos) and the eos token are excluded, every
other syllable prediction counts, each position unweighted. Cross-entropy
is reported in nats. Classification metrics follow the usual confusion
arithmetic with ROC points swept over distinct scores and AUC by the
trapezoidal rule.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger(__name__)


class MetricsError(ValueError):
    pass


@dataclass
class PredictionMask:
    """Per-target include flags for one song; entry t covers target index t+1."""

    include: np.ndarray

    @classmethod
    def for_song(cls, song_len: int) -> "PredictionMask":
        inc = np.ones(song_len - 1, dtype=bool)
        inc[0] = False      # first syllable (right after bos)
        inc[-1] = False     # eos
        return cls(inc)


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total

    @property
    def tpr(self) -> float:
        return self.tp / (self.tp + self.fn)

    @property
    def fpr(self) -> float:
        return self.fp / (self.fp + self.tn)


@dataclass
class ClassificationReport:
    accuracy: float
    roc: np.ndarray  # rows of (fpr, tpr), monotone in fpr
    auc: float
    confusion: ConfusionCounts


def _song_distributions(model, song):
    q = np.asarray(model.next_token_distributions(song.ids), dtype=np.float64)
    if q.shape != (len(song.ids) - 1, q.shape[1]):
        raise MetricsError("model returned distributions of the wrong shape")
    return q


def next_token_cross_entropy(model, corpus, mask_fn=None) -> tuple:
    """Mean -log q(true next token) in nats over the masked positions.

    ``mask_fn(song) -> bool array of len(song)-1`` overrides the default
    prediction mask. Returns (mean_nats, n_predictions); positions where
    the model gives the true token zero mass make the mean infinite and
    are logged.
    """
    total = 0.0
    n = 0
    n_zero = 0
    for song in corpus.songs:
        include = mask_fn(song) if mask_fn else PredictionMask.for_song(len(song.ids)).include
        if not include.any():
            continue
        q = _song_distributions(model, song)
        truth = np.asarray(song.ids[1:])
        probs = q[np.arange(len(truth)), truth][include]
        n += int(include.sum())
        zero = probs <= 0.0
        n_zero += int(zero.sum())
        with np.errstate(divide="ignore"):
            total += float(-np.log(probs).sum())
    if n == 0:
        return float("nan"), 0
    if n_zero:
        logger.warning("cross-entropy hit %d zero-probability positions (mean is +inf)", n_zero)
    return total / n, n


def next_token_accuracy(model, corpus, mask_fn=None) -> float:
    """Fraction of masked positions where argmax(q) equals the true token.

    Argmax ties break toward the lowest token id.
    """
    correct = 0
    n = 0
    for song in corpus.songs:
        include = mask_fn(song) if mask_fn else PredictionMask.for_song(len(song.ids)).include
        if not include.any():
            continue
        q = _song_distributions(model, song)
        truth = np.asarray(song.ids[1:])
        pred = q.argmax(axis=1)  # first occurrence = lowest id on ties
        correct += int((pred[include] == truth[include]).sum())
        n += int(include.sum())
    if n == 0:
        return float("nan")
    return correct / n


def confusion_at_threshold(scores, labels, threshold: float = 0.5) -> ConfusionCounts:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    pred = scores >= threshold
    return ConfusionCounts(
        tp=int(np.sum(pred & (labels == 1))),
        fp=int(np.sum(pred & (labels == 0))),
        tn=int(np.sum(~pred & (labels == 0))),
        fn=int(np.sum(~pred & (labels == 1))),
    )


def roc_curve(scores, labels) -> np.ndarray:
    """(fpr, tpr) points from threshold +inf down through each distinct score."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("ROC/AUC need both classes present")
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(sorted_scores):
        j = i
        while j < len(sorted_scores) and sorted_scores[j] == sorted_scores[i]:
            j += 1
        tp += int((sorted_labels[i:j] == 1).sum())
        fp += int((sorted_labels[i:j] == 0).sum())
        points.append((fp / n_neg, tp / n_pos))
        i = j
    return np.asarray(points)


def auc_from_roc(roc: np.ndarray) -> float:
    x = roc[:, 0]
    y = roc[:, 1]
    return float(np.trapezoid(y, x))


def classification_metrics(scores, labels, threshold: float = 0.5) -> ClassificationReport:
    """Accuracy at the threshold plus the ROC sweep and trapezoidal AUC."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    if scores.shape != labels.shape:
        raise MetricsError("scores and labels must have equal length")
    confusion = confusion_at_threshold(scores, labels, threshold)
    roc = roc_curve(scores, labels)
    return ClassificationReport(
        accuracy=confusion.accuracy,
        roc=roc,
        auc=auc_from_roc(roc),
        confusion=confusion,
    )
