"""Evaluation metrics: F1 (micro/macro), accuracy, AUROC and silhouette cluster separation."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DegenerateVectorError


def _confusion(preds, labels):
    p = np.asarray(preds).astype(bool)
    y = np.asarray(labels).astype(bool)
    if p.shape != y.shape:
        raise ConfigurationError(f"predictions {p.shape} and labels {y.shape} differ in shape")
    if p.ndim == 1:
        p, y = p[:, None], y[:, None]
    tp = (p & y).sum(axis=0)
    fp = (p & ~y).sum(axis=0)
    fn = (~p & y).sum(axis=0)
    return tp, fp, fn


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def _f1(p, r):
    return _ratio(2.0 * p * r, p + r)


def per_class_precision_recall(preds, labels):
    tp, fp, fn = _confusion(preds, labels)
    return _ratio(tp, tp + fp), _ratio(tp, tp + fn)


def macro_f1(preds, labels) -> float:
    """Unweighted mean of per-class F1; a class with p + r = 0 contributes 0."""
    p, r = per_class_precision_recall(preds, labels)
    return float(np.mean(_f1(p, r)))


def micro_f1(preds, labels) -> float:
    tp, fp, fn = (int(v.sum()) for v in _confusion(preds, labels))
    p = _ratio(tp, tp + fp)
    r = _ratio(tp, tp + fn)
    return float(_f1(p, r))


def _midranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(xs):
        j = i
        while j + 1 < len(xs) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), via the Mann-Whitney U statistic with midranks."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ConfigurationError(f"{s.size} scores for {y.size} labels")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ConfigurationError("AUROC needs both positive and negative labels")
    ranks = _midranks(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def predictions(logits, task: str, threshold: float = 0.5) -> np.ndarray:
    """0/1 prediction matrix: one-hot argmax (ties to the lowest index) or sigmoid > threshold."""
    z = np.asarray(logits, dtype=np.float64)
    if task == "single-label":
        out = np.zeros_like(z, dtype=np.int64)
        out[np.arange(z.shape[0]), np.argmax(z, axis=1)] = 1
        return out
    z = z.reshape(z.shape[0], -1)
    return (1.0 / (1.0 + np.exp(-z)) > threshold).astype(np.int64)


def label_matrix(labels, task: str, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if task == "single-label":
        out = np.zeros((y.shape[0], num_classes), dtype=np.int64)
        out[np.arange(y.shape[0]), y.astype(np.intp)] = 1
        return out
    return y.reshape(y.shape[0], -1).astype(np.int64)


def accuracy(logits, labels, task: str = "single-label", threshold: float = 0.5) -> float:
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(labels)
    if task == "single-label":
        return float(np.mean(np.argmax(z, axis=1) == y))
    preds = predictions(z, task, threshold)
    return float(np.mean(np.all(preds == y.reshape(preds.shape), axis=1)))


def cluster_separation(embeddings, labels) -> float:
    """Mean Euclidean silhouette of the labelled embedding."""
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    if y.ndim > 1:
        # multi-label rows become one cluster id per distinct label set
        _, y = np.unique(y, axis=0, return_inverse=True)
        y = y.ravel()
    classes, counts = np.unique(y, return_counts=True)
    if classes.size < 2 or counts.min() < 2:
        raise ConfigurationError(f"silhouette needs >= 2 classes with >= 2 members each, got counts {counts.tolist()}")
    sq = np.einsum("ij,ij->i", x, x)
    d = np.sqrt(np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0))
    np.fill_diagonal(d, 0.0)
    if d.max() == 0.0:
        raise DegenerateVectorError("all embeddings coincide; silhouette undefined")
    member = y[None, :] == classes[:, None]
    sums = d @ member.T.astype(np.float64)
    own = np.searchsorted(classes, y)
    rows = np.arange(y.size)
    a = sums[rows, own] / (counts[own] - 1)
    means = sums / counts[None, :]
    means[rows, own] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.divide(b - a, denom, out=np.zeros_like(a), where=denom > 0)
    return float(s.mean())


@dataclass
class EvalReport:
    metrics: dict[str, float] = field(default_factory=dict)
    precision: list[float] = field(default_factory=list)
    recall: list[float] = field(default_factory=list)
    confusion: dict[str, list[int]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"metrics": self.metrics, "precision": self.precision, "recall": self.recall,
                "confusion": self.confusion}


def evaluate(logits, labels, task: str, num_classes: int, embeddings=None, threshold: float = 0.5) -> EvalReport:
    preds = predictions(logits, task, threshold)
    y = label_matrix(labels, task, num_classes)
    tp, fp, fn = _confusion(preds, y)
    p, r = per_class_precision_recall(preds, y)
    metrics = {
        "accuracy": accuracy(logits, labels, task, threshold),
        "micro_f1": micro_f1(preds, y),
        "macro_f1": macro_f1(preds, y),
    }
    if task == "binary" and 0 < int(y.sum()) < y.shape[0]:
        metrics["auroc"] = auroc(np.asarray(logits).ravel(), y.ravel())
    if embeddings is not None:
        try:
            metrics["silhouette"] = cluster_separation(embeddings, labels)
        except (ConfigurationError, DegenerateVectorError):
            pass
    return EvalReport(
        metrics=metrics,
        precision=p.tolist(),
        recall=r.tolist(),
        confusion={"tp": tp.tolist(), "fp": fp.tolist(), "fn": fn.tolist()},
    )


SELECTION_DEFAULTS = {"binary": "auroc", "multi-label": "micro_f1", "single-label": "accuracy"}
