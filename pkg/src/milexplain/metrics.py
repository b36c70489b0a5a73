"""Classification metric suite: accuracy, macro F1, one-vs-rest AUROC,
per-class AUPRC, confusion matrix.

Classes absent from the evaluation set get NaN for their AUROC/AUPRC
rather than being silently dropped.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.metrics import average_precision_score, f1_score, roc_auc_score


@dataclass
class MetricsReport:
    accuracy: float
    macro_f1: float
    auroc: float
    auprc_per_class: list[float]
    auroc_per_class: list[float]
    confusion_matrix: np.ndarray  # rows = true class, cols = predicted

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "auroc": self.auroc,
            "auroc_per_class": self.auroc_per_class,
            "auprc_per_class": self.auprc_per_class,
            "confusion_matrix": self.confusion_matrix.tolist(),
        }

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        with open(path, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")


def compute_metrics(labels: np.ndarray, probs: np.ndarray,
                    num_classes: int) -> MetricsReport:
    """Build a MetricsReport from true labels and an (n, C) probability matrix."""
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    preds = probs.argmax(axis=1)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for t, p in zip(labels, preds):
        cm[t, p] += 1
    accuracy = float(np.trace(cm)) / max(1, len(labels))
    macro_f1 = float(f1_score(labels, preds, labels=range(num_classes),
                              average="macro", zero_division=0))
    auroc_pc, auprc_pc = [], []
    for c in range(num_classes):
        binary = (labels == c).astype(int)
        if binary.min() == binary.max():
            auroc_pc.append(math.nan)
            auprc_pc.append(math.nan)
        else:
            auroc_pc.append(float(roc_auc_score(binary, probs[:, c])))
            auprc_pc.append(float(average_precision_score(binary, probs[:, c])))
    defined = [a for a in auroc_pc if not math.isnan(a)]
    auroc = float(np.mean(defined)) if defined else math.nan
    return MetricsReport(
        accuracy=accuracy,
        macro_f1=macro_f1,
        auroc=auroc,
        auroc_per_class=auroc_pc,
        auprc_per_class=auprc_pc,
        confusion_matrix=cm,
    )
