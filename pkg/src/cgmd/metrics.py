"""Patient-level binary classification metrics."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class EvalReport:
    auc: float
    auprc: float
    sensitivity: float
    specificity: float
    f1: float
    threshold: float
    n_pos: int
    n_neg: int

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


METRIC_NAMES = ("auc", "auprc", "sensitivity", "specificity", "f1")


def _check(scores, labels, need_both: bool = True) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels).reshape(-1).astype(int)
    if scores.shape != labels.shape:
        raise MetricError(f"{scores.size} scores for {labels.size} labels")
    if need_both and (labels.min(initial=1) != 0 or labels.max(initial=0) != 1):
        raise MetricError("both classes must be present")
    return scores, labels


def _average_ranks(x: np.ndarray) -> np.ndarray:
    _, inverse, counts = np.unique(x, return_inverse=True, return_counts=True)
    # 1-based rank of the middle of each tie block
    upper = np.cumsum(counts)
    mid = upper - (counts - 1) / 2.0
    return mid[inverse]


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(s+ > s-) + P(s+ == s-) / 2 over all pairs."""
    scores, labels = _check(scores, labels)
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    u = _average_ranks(scores)[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision from a descending sweep; tied scores enter together."""
    scores, labels = _check(scores, labels, need_both=False)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], labels[order]
    boundaries = np.flatnonzero(np.diff(s)) + 1
    ends = np.append(boundaries, s.size)
    tp = np.cumsum(y)[ends - 1]
    seen = ends
    gained = np.diff(np.concatenate([[0], tp]))
    terms = (tp / seen) * (gained / n_pos)
    return math.fsum(terms[gained > 0])


def confusion_counts(scores, labels, threshold: float) -> tuple[int, int, int, int]:
    scores, labels = _check(scores, labels, need_both=False)
    pred = scores > threshold
    tp = int(np.sum(pred & (labels == 1)))
    fp = int(np.sum(pred & (labels == 0)))
    fn = int(np.sum(~pred & (labels == 1)))
    tn = int(np.sum(~pred & (labels == 0)))
    return tp, fp, fn, tn


def confusion_metrics(scores, labels, threshold: float) -> tuple[float, float, float]:
    """Sensitivity, specificity and F1 predicting positive iff ``score > threshold``."""
    _check(scores, labels)
    tp, fp, fn, tn = confusion_counts(scores, labels, threshold)
    denom = 2 * tp + fp + fn
    return tp / (tp + fn), tn / (tn + fp), (2 * tp / denom if denom else 0.0)


def youden_threshold(scores, labels) -> float:
    """Threshold maximizing sensitivity + specificity - 1.

    Candidates are -inf, midpoints between consecutive distinct scores and
    +inf; ties resolve to the lowest candidate.
    """
    scores, labels = _check(scores, labels)
    uniq = np.unique(scores)
    candidates = np.concatenate([[-np.inf], (uniq[:-1] + uniq[1:]) / 2.0, [np.inf]])
    pos = np.sort(scores[labels == 1])
    neg = np.sort(scores[labels == 0])
    n_pos, n_neg = pos.size, neg.size
    tp = n_pos - np.searchsorted(pos, candidates, side="right")
    tn = np.searchsorted(neg, candidates, side="right")
    # J scaled by n_pos * n_neg stays integral, so ties compare exactly
    scaled_j = tp * n_neg + tn * n_pos
    return float(candidates[int(np.argmax(scaled_j))])


def evaluate(scores, labels, threshold: float) -> EvalReport:
    scores, labels = _check(scores, labels)
    sens, spec, f1 = confusion_metrics(scores, labels, threshold)
    return EvalReport(
        auc=auc(scores, labels),
        auprc=auprc(scores, labels),
        sensitivity=sens,
        specificity=spec,
        f1=f1,
        threshold=float(threshold),
        n_pos=int(labels.sum()),
        n_neg=int((labels == 0).sum()),
    )
