"""Classification and regression metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def _ints(a) -> np.ndarray:
    return np.asarray(a).astype(np.int64).ravel()


def balanced_accuracy(preds, labels) -> float:
    """Mean per-class recall over the classes present in ``labels``."""
    preds, labels = _ints(preds), _ints(labels)
    recalls = [np.mean(preds[labels == c] == c) for c in np.unique(labels)]
    return float(np.mean(recalls))


def confusion_matrix(preds, labels, classes=None) -> np.ndarray:
    preds, labels = _ints(preds), _ints(labels)
    if classes is None:
        classes = np.union1d(preds, labels)
    pos = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(labels, preds):
        cm[pos[t], pos[p]] += 1
    return cm


def kappa_from_confusion(cm: np.ndarray) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    n = cm.sum()
    po = np.trace(cm) / n
    pe = float(cm.sum(1) @ cm.sum(0)) / n**2
    if pe == 1.0:
        return 1.0 if po == 1.0 else 0.0
    return float((po - pe) / (1 - pe))


def cohens_kappa(preds, labels) -> float:
    return kappa_from_confusion(confusion_matrix(preds, labels))


def weighted_f1(preds, labels) -> float:
    preds, labels = _ints(preds), _ints(labels)
    total = 0.0
    for c in np.unique(labels):
        tp = np.sum((preds == c) & (labels == c))
        fp = np.sum((preds == c) & (labels != c))
        fn = np.sum((preds != c) & (labels == c))
        f1 = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
        total += f1 * np.sum(labels == c)
    return float(total / labels.size)


def _ranked_counts(scores, labels):
    """Cumulative (tp, fp) at each distinct threshold, highest score first."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = _ints(labels)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]  # end of each tie group
    tp = np.cumsum(y)[last]
    fp = np.cumsum(1 - y)[last]
    return tp.astype(np.float64), fp.astype(np.float64)


def auroc(scores, labels) -> float:
    """Trapezoidal area under the ROC curve; tied scores form one threshold."""
    tp, fp = _ranked_counts(scores, labels)
    if tp[-1] == 0 or fp[-1] == 0:
        raise ValueError("AUROC needs both positive and negative labels")
    tpr = np.r_[0.0, tp / tp[-1]]
    fpr = np.r_[0.0, fp / fp[-1]]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def auc_pr(scores, labels) -> float:
    """Step-wise area under the precision-recall curve: sum of precision at
    each threshold times the recall gained there."""
    tp, fp = _ranked_counts(scores, labels)
    if tp[-1] == 0:
        raise ValueError("AUC-PR needs at least one positive label")
    precision = tp / (tp + fp)
    recall = np.r_[0.0, tp / tp[-1]]
    return float(np.sum(np.diff(recall) * precision))


def rmse(preds, targets) -> float:
    p, t = _columns(preds, targets)
    return float(np.mean(np.sqrt(np.mean((p - t) ** 2, axis=0))))


def pearson(preds, targets) -> float:
    p, t = _columns(preds, targets)
    pc, tc = p - p.mean(0), t - t.mean(0)
    denom = np.sqrt((pc**2).sum(0) * (tc**2).sum(0))
    r = np.where(denom > 0, (pc * tc).sum(0) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(np.mean(r))


def r2(preds, targets) -> float:
    p, t = _columns(preds, targets)
    ss_res = ((t - p) ** 2).sum(0)
    ss_tot = ((t - t.mean(0)) ** 2).sum(0)
    safe = np.where(ss_tot > 0, ss_tot, 1.0)
    per = np.where(ss_tot > 0, 1 - ss_res / safe, np.where(ss_res == 0, 1.0, 0.0))
    return float(np.mean(per))


def regression_metrics(preds, targets) -> tuple[float, float, float]:
    return rmse(preds, targets), pearson(preds, targets), r2(preds, targets)


def _columns(preds, targets):
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    return p.reshape(len(p), -1), t.reshape(len(t), -1)


MONITOR = {"binary": "auroc", "multiclass": "cohens_kappa", "regression": "r2"}


@dataclass
class MetricsReport:
    task: str
    values: dict[str, float] = field(default_factory=dict)

    @property
    def monitor(self) -> float:
        return self.values[MONITOR[self.task]]

    def as_text(self) -> str:
        lines = [f"task = {self.task}"]
        lines += [f"{k} = {v:.6f}" for k, v in self.values.items()]
        return "\n".join(lines)

    def row(self, prefix: dict[str, str] | None = None) -> str:
        cells = list((prefix or {}).values()) + [f"{v:.6f}" for v in self.values.values()]
        return "\t".join(cells)

    def header(self, prefix: dict[str, str] | None = None) -> str:
        return "\t".join(list(prefix or {}) + list(self.values))


def report(task: str, scores, labels) -> MetricsReport:
    """Metrics for ``task`` from scores (probabilities / regressed values)."""
    scores = np.asarray(scores)
    if task == "multiclass":
        preds = scores.argmax(-1)
        vals = {
            "balanced_accuracy": balanced_accuracy(preds, labels),
            "cohens_kappa": cohens_kappa(preds, labels),
            "weighted_f1": weighted_f1(preds, labels),
        }
    elif task == "binary":
        preds = (scores >= 0.5).astype(int)
        vals = {
            "balanced_accuracy": balanced_accuracy(preds, labels),
            "auc_pr": auc_pr(scores, labels),
            "auroc": auroc(scores, labels),
        }
    elif task == "regression":
        e, r, d = regression_metrics(scores, labels)
        vals = {"rmse": e, "pearson": r, "r2": d}
    else:
        raise ValueError(f"unknown task {task!r}")
    return MetricsReport(task, vals)
