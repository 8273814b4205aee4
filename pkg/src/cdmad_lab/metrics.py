"""Balanced-error metrics: confusion matrix, bACC, GM, BER and
many/medium/few group accuracies."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np


class EmptyClass(ValueError):
    pass


def confusion(preds, labels, C):
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError("preds and labels differ in length")
    for a, name in ((labels, "label"), (preds, "prediction")):
        if a.size and (a.min() < 0 or a.max() >= C):
            raise ValueError(f"{name} out of range [0, {C})")
    m = np.zeros((C, C), dtype=np.int64)
    np.add.at(m, (labels, preds), 1)
    return m


def per_class_accuracy(conf):
    conf = np.asarray(conf)
    rows = conf.sum(axis=1)
    if np.any(rows == 0):
        raise EmptyClass("a class has no test samples")
    return np.diag(conf) / rows


def bacc(conf):
    return float(np.mean(per_class_accuracy(conf)))


def gm(conf):
    acc = per_class_accuracy(conf)
    if np.any(acc == 0):
        return 0.0
    return float(math.exp(np.mean(np.log(acc))))


def ber(conf):
    return float(np.mean(1.0 - per_class_accuracy(conf)))


def default_boundaries(C):
    if C == 10:
        return (3, 7)
    return (int(round(0.3 * C)), int(round(0.7 * C)))


def group_accuracies(conf, boundaries=None):
    """Mean per-class accuracy over classes [0, b1), [b1, b2), [b2, C).

    An empty group reports NaN.
    """
    acc = per_class_accuracy(conf)
    C = len(acc)
    b1, b2 = default_boundaries(C) if boundaries is None else boundaries
    if not 0 <= b1 <= b2 <= C:
        raise ValueError(f"boundaries {(b1, b2)} do not partition [0, {C})")
    groups = (acc[:b1], acc[b1:b2], acc[b2:])
    return tuple(float(g.mean()) if len(g) else float("nan") for g in groups)


@dataclass
class MetricsRecord:
    bacc: float
    gm: float
    ber: float
    per_class_acc: list
    group_acc: tuple
    confusion: list = field(default_factory=list)
    seed: int = 0
    epoch: int = -1
    algo: str = ""
    refinement: str = ""
    probe: str = ""

    @classmethod
    def from_predictions(cls, preds, labels, C, boundaries=None, **meta):
        m = confusion(preds, labels, C)
        return cls(bacc(m), gm(m), ber(m), per_class_accuracy(m).tolist(),
                   group_accuracies(m, boundaries), m.tolist(), **meta)

    def to_dict(self):
        return asdict(self)


def proportions(conf):
    conf = np.asarray(conf, dtype=np.float64)
    return conf / np.maximum(conf.sum(axis=1, keepdims=True), 1)


def confusion_text(conf):
    conf = np.asarray(conf)
    width = max(len(str(int(conf.max()))) if conf.size else 1, 3)
    head = "true\\pred " + " ".join(f"{j:>{width}d}" for j in range(conf.shape[1]))
    lines = [head]
    for i, row in enumerate(conf):
        lines.append(f"{i:>9d} " + " ".join(f"{int(v):>{width}d}" for v in row))
    return "\n".join(lines) + "\n"


def confusion_proportion_csv(conf):
    p = proportions(conf)
    lines = ["true," + ",".join(f"pred_{j}" for j in range(p.shape[1]))]
    for i, row in enumerate(p):
        lines.append(f"{i}," + ",".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"
