"""Classification metrics: ACC, BACC, macro one-vs-rest AUC and mAP."""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

__all__ = [
    "REPORT_SCHEMA_VERSION",
    "MetricsReport",
    "confusion_matrix",
    "predict",
    "balanced_accuracy",
    "binary_roc",
    "roc_auc_macro",
    "average_precision",
    "mean_average_precision",
    "report_from_scores",
    "evaluate",
]

REPORT_SCHEMA_VERSION = 1


def predict(scores) -> np.ndarray:
    """Argmax over classes; ``np.argmax`` already resolves ties to the lowest index."""
    return np.asarray(scores).argmax(axis=1)


def confusion_matrix(labels, predictions, num_classes: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def _recalls(confusion) -> np.ndarray:
    cm = np.asarray(confusion, dtype=np.float64)
    support = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(support > 0, np.diag(cm) / np.where(support > 0, support, 1), np.nan)


def balanced_accuracy(confusion) -> float:
    """Mean recall over classes with at least one true sample."""
    cm = np.asarray(confusion)
    if cm.sum() == 0:
        raise ValueError("confusion matrix is empty")
    rec = _recalls(cm)
    return float(np.nanmean(rec))


def binary_roc(scores, positives) -> Tuple[np.ndarray, np.ndarray]:
    """(FPR, TPR) by sweeping a threshold over the unique scores, high to low."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    s, p = scores[order], positives[order]
    tp = np.cumsum(p)
    fp = np.cumsum(~p)
    # last index of every run of equal scores
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]
    n_pos, n_neg = p.sum(), (~p).sum()
    tpr = np.r_[0.0, tp[last] / n_pos]
    fpr = np.r_[0.0, fp[last] / n_neg]
    return fpr, tpr


def _present(labels, num_classes: int) -> List[int]:
    labels = np.asarray(labels)
    present = []
    for c in range(num_classes):
        n_pos = int((labels == c).sum())
        if n_pos == 0 or n_pos == len(labels):
            warnings.warn(f"class {c} excluded: one-vs-rest needs positives and negatives", RuntimeWarning)
        else:
            present.append(c)
    return present


def roc_auc_macro(scores, labels):
    """Macro one-vs-rest trapezoidal AUC.

    Returns:
        ``(auc_macro, per_class_auc, roc_points)``; classes without both
        positives and negatives get ``nan`` AUC and empty ROC points.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    c = scores.shape[1]
    per_class = np.full(c, np.nan)
    points: List[List[Tuple[float, float]]] = [[] for _ in range(c)]
    for k in _present(labels, c):
        fpr, tpr = binary_roc(scores[:, k], labels == k)
        per_class[k] = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
        points[k] = list(zip(fpr.tolist(), tpr.tolist()))
    if np.all(np.isnan(per_class)):
        raise ValueError("no class has both positives and negatives")
    return float(np.nanmean(per_class)), per_class, points


def average_precision(scores, positives) -> float:
    """Mean of precision@k over the ranks k of the positives (descending, stable)."""
    positives = np.asarray(positives, dtype=bool)
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="mergesort")
    hits = positives[order]
    if not hits.any():
        raise ValueError("average precision undefined without positives")
    precision_at = np.cumsum(hits) / np.arange(1, len(hits) + 1)
    return float(precision_at[hits].mean())


def mean_average_precision(scores, labels, return_per_class: bool = False):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    c = scores.shape[1]
    per_class = np.full(c, np.nan)
    for k in _present(labels, c):
        per_class[k] = average_precision(scores[:, k], labels == k)
    if np.all(np.isnan(per_class)):
        raise ValueError("no class has both positives and negatives")
    value = float(np.nanmean(per_class))
    return (value, per_class) if return_per_class else value


@dataclass
class MetricsReport:
    acc: float
    bacc: float
    auc_macro: float
    map_macro: float
    recall: List[Optional[float]]
    ap: List[Optional[float]]
    auc: List[Optional[float]]
    confusion: List[List[int]]
    roc_points: List[List[Tuple[float, float]]]
    class_names: List[str] = field(default_factory=list)
    excluded_classes: List[int] = field(default_factory=list)
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "MetricsReport":
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ValueError(
                f"report schema version {d.get('schema_version')} != {REPORT_SCHEMA_VERSION}"
            )
        d["roc_points"] = [[tuple(p) for p in pts] for pts in d["roc_points"]]
        return cls(**d)


def _nan_to_none(a) -> List[Optional[float]]:
    return [None if np.isnan(v) else float(v) for v in a]


def report_from_scores(scores, labels, class_names: Optional[Sequence[str]] = None) -> MetricsReport:
    """Full report from an (N, C) probability/score matrix and true labels."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or len(scores) == 0:
        raise ValueError("scores must be a non-empty (N, C) matrix")
    c = scores.shape[1]
    cm = confusion_matrix(labels, predict(scores), c)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        auc_macro, auc, roc = roc_auc_macro(scores, labels)
        map_macro, ap = mean_average_precision(scores, labels, return_per_class=True)
    excluded = [k for k in range(c) if np.isnan(auc[k])]
    if excluded:
        warnings.warn(f"classes {excluded} excluded from AUC/mAP", RuntimeWarning)
    return MetricsReport(
        acc=float(np.trace(cm) / cm.sum()),
        bacc=balanced_accuracy(cm),
        auc_macro=auc_macro,
        map_macro=map_macro,
        recall=_nan_to_none(_recalls(cm)),
        ap=_nan_to_none(ap),
        auc=_nan_to_none(auc),
        confusion=cm.tolist(),
        roc_points=roc,
        class_names=list(class_names) if class_names is not None else [str(k) for k in range(c)],
        excluded_classes=excluded,
    )


@torch.no_grad()
def predict_scores(model, ds, batch_size: int = 64):
    """Softmax probabilities (T=1) and labels for every item of ``ds``, in order."""
    from .data import batch_iterator

    h, w, _ = model.spec.input_size
    was_training = model.training
    model.eval()
    probs, labels = [], []
    try:
        for images, y in batch_iterator(ds, batch_size, seed=0, size=(h, w), shuffle=False):
            probs.append(torch.softmax(model(images.to(next(model.parameters()).dtype)), dim=1))
            labels.append(y)
    finally:
        model.train(was_training)
    return torch.cat(probs).double().numpy(), torch.cat(labels).numpy()


def evaluate(model, ds, batch_size: int = 64) -> MetricsReport:
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty split")
    scores, labels = predict_scores(model, ds, batch_size)
    return report_from_scores(scores, labels, ds.class_names)
