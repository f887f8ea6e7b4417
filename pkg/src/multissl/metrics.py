"""Weighted classification metrics and confusion matrices.

Single-label metrics weight per-class precision/recall/F1 by class
support; the weighted accuracy is support-weighted recall, which equals
plain accuracy. Multi-label metrics treat each class as a binary problem
with the weighted accuracy (TP * N/P + TN) / (2N) over P positives and N
negatives; classes without positives fall back to TN/N and are flagged.
Both definitions are embedded in every report so emitted numbers are
self-describing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError

WACC_SINGLE_DEFINITION = ("support-weighted recall: sum_c (support_c / total) * "
                          "recall_c, equal to overall accuracy")
WACC_MULTI_DEFINITION = ("per class (TP * N/P + TN) / (2N) with P positives and N "
                         "negatives; classes with P=0 use TN/N and are flagged; "
                         "aggregate is the positive-support-weighted mean")


@dataclass
class PerClassMetrics:
    name: str
    support: int
    precision: float
    recall: float
    f1: float
    weighted_accuracy: float | None = None
    flagged: bool = False


@dataclass
class MetricsReport:
    task_type: str
    weighted_accuracy: float
    weighted_f1: float
    weighted_precision: float
    weighted_recall: float
    per_class: list = field(default_factory=list)
    confusion: np.ndarray | None = None            # single-label [C x C]
    per_class_confusion: np.ndarray | None = None  # multi-label [C x 2 x 2]
    class_names: list = field(default_factory=list)
    definitions: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        doc = {
            "task_type": self.task_type,
            "metrics": {
                "weighted_accuracy": self.weighted_accuracy,
                "weighted_f1": self.weighted_f1,
                "weighted_precision": self.weighted_precision,
                "weighted_recall": self.weighted_recall,
            },
            "per_class": [
                {
                    "class": pc.name,
                    "support": pc.support,
                    "precision": pc.precision,
                    "recall": pc.recall,
                    "f1": pc.f1,
                    **({"weighted_accuracy": pc.weighted_accuracy,
                        "flagged": pc.flagged}
                       if pc.weighted_accuracy is not None else {}),
                }
                for pc in self.per_class
            ],
            "class_names": list(self.class_names),
            "definitions": dict(self.definitions),
        }
        if self.confusion is not None:
            doc["confusion"] = self.confusion.tolist()
        if self.per_class_confusion is not None:
            doc["confusion"] = self.per_class_confusion.tolist()
        return doc


def confusion_matrix(preds, labels, n_classes: int) -> np.ndarray:
    """Integer matrix whose [i, j] entry counts true class i predicted as j."""
    p = np.asarray(preds, dtype=np.int64)
    t = np.asarray(labels, dtype=np.int64)
    if p.shape != t.shape or p.ndim != 1:
        raise ContractError(f"preds and labels must be equal-length vectors, got "
                            f"{p.shape} and {t.shape}")
    if p.size and (p.min() < 0 or p.max() >= n_classes
                   or t.min() < 0 or t.max() >= n_classes):
        raise ContractError(f"class indices must lie in [0, {n_classes})")
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (t, p), 1)
    return out


def _prf(tp: float, fp: float, fn: float) -> tuple:
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = (2 * precision * recall / (precision + recall)
          if precision + recall > 0 else 0.0)
    return precision, recall, f1


def weighted_metrics_single(preds, labels, n_classes: int,
                            class_names=None) -> MetricsReport:
    """Support-weighted precision/recall/F1 plus the confusion matrix."""
    conf = confusion_matrix(preds, labels, n_classes)
    names = list(class_names) if class_names else [str(c) for c in range(n_classes)]
    if len(names) != n_classes:
        raise ContractError(f"{len(names)} class names for {n_classes} classes")

    total = int(conf.sum())
    per_class = []
    agg = {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    for c in range(n_classes):
        support = int(conf[c].sum())
        tp = float(conf[c, c])
        fp = float(conf[:, c].sum() - conf[c, c])
        fn = float(support - tp)
        precision, recall, f1 = _prf(tp, fp, fn)
        per_class.append(PerClassMetrics(name=names[c], support=support,
                                         precision=precision, recall=recall, f1=f1))
        if total > 0:
            weight = support / total
            agg["precision"] += weight * precision
            agg["recall"] += weight * recall
            agg["f1"] += weight * f1

    return MetricsReport(
        task_type="single_label",
        weighted_accuracy=agg["recall"],
        weighted_f1=agg["f1"],
        weighted_precision=agg["precision"],
        weighted_recall=agg["recall"],
        per_class=per_class,
        confusion=conf,
        class_names=names,
        definitions={"wacc": WACC_SINGLE_DEFINITION},
    )


def weighted_metrics_multilabel(scores, labels, threshold: float = 0.5,
                                class_names=None) -> MetricsReport:
    """Per-class binary metrics from scores; prediction is strict ``score > threshold``."""
    if not (0.0 < threshold < 1.0):
        raise ConfigError(f"threshold must lie in (0, 1), got {threshold}")
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape or s.ndim != 2:
        raise ContractError(f"scores and labels must both be [N x C], got "
                            f"{s.shape} and {y.shape}")
    n_classes = s.shape[1]
    names = list(class_names) if class_names else [str(c) for c in range(n_classes)]
    if len(names) != n_classes:
        raise ContractError(f"{len(names)} class names for {n_classes} classes")

    preds = s > threshold
    truth = y == 1
    per_class = []
    cells = np.zeros((n_classes, 2, 2), dtype=np.int64)
    agg = {"wacc": 0.0, "precision": 0.0, "recall": 0.0, "f1": 0.0}
    total_support = 0
    for c in range(n_classes):
        tp = int(np.sum(preds[:, c] & truth[:, c]))
        tn = int(np.sum(~preds[:, c] & ~truth[:, c]))
        fp = int(np.sum(preds[:, c] & ~truth[:, c]))
        fn = int(np.sum(~preds[:, c] & truth[:, c]))
        cells[c] = [[tn, fp], [fn, tp]]
        positives = tp + fn
        negatives = tn + fp
        flagged = positives == 0
        if negatives == 0:
            wacc = 1.0 if fn == 0 else tp / positives
        elif flagged:
            wacc = tn / negatives
        else:
            wacc = (tp * (negatives / positives) + tn) / (2.0 * negatives)
        precision, recall, f1 = _prf(tp, fp, fn)
        per_class.append(PerClassMetrics(name=names[c], support=positives,
                                         precision=precision, recall=recall, f1=f1,
                                         weighted_accuracy=wacc, flagged=flagged))
        total_support += positives
        agg["wacc"] += positives * wacc
        agg["precision"] += positives * precision
        agg["recall"] += positives * recall
        agg["f1"] += positives * f1

    scale = 1.0 / total_support if total_support > 0 else 0.0
    return MetricsReport(
        task_type="multi_label",
        weighted_accuracy=agg["wacc"] * scale,
        weighted_f1=agg["f1"] * scale,
        weighted_precision=agg["precision"] * scale,
        weighted_recall=agg["recall"] * scale,
        per_class=per_class,
        per_class_confusion=cells,
        class_names=names,
        definitions={"wacc": WACC_MULTI_DEFINITION},
    )
