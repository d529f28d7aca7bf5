"""Task and imputation metrics plus cross-fold aggregation."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import ConfigError, EmptyEval, UndefinedMetric


def accuracy(pred_classes, true_classes) -> float:
    p, t = np.asarray(pred_classes), np.asarray(true_classes)
    if p.size == 0:
        raise EmptyEval("accuracy of an empty set")
    if p.shape != t.shape:
        raise ValueError("prediction and target lengths differ")
    return float((p == t).mean())


def binary_auc(scores, labels) -> float:
    """Mann-Whitney rank statistic; ties count one half."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUC needs both classes present")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def roc_auc(scores, labels, mode: str = "binary") -> float:
    """Binary AUC, or ``macro_ovr``: mean one-vs-rest AUC over classes with both outcomes present.

    For ``macro_ovr`` ``scores`` is an (n, L) matrix of class scores.
    """
    if mode == "binary":
        return binary_auc(scores, labels)
    if mode != "macro_ovr":
        raise ValueError(f"unknown AUC mode {mode!r}")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    aucs = []
    for c in range(scores.shape[1]):
        try:
            aucs.append(binary_auc(scores[:, c], labels == c))
        except UndefinedMetric:
            continue
    if not aucs:
        raise UndefinedMetric("no class has both outcomes present")
    return float(np.mean(aucs))


def task_auc(probs: np.ndarray, labels) -> float:
    """AUC appropriate to the number of classes: binary on p(class 1), else macro one-vs-rest."""
    probs = np.asarray(probs)
    if probs.shape[1] == 2:
        return binary_auc(probs[:, 1], labels)
    return roc_auc(probs, labels, "macro_ovr")


def rmse_masked(preds, targets, eligible) -> float:
    e = np.asarray(eligible, dtype=bool)
    if not e.any():
        raise EmptyEval("RMSE over an empty support")
    diff = (np.asarray(preds) - np.asarray(targets))[e]
    return float(np.sqrt((diff * diff).mean()))


def f1_binary(preds, targets, threshold: float = 0.5) -> float:
    p = np.asarray(preds) >= threshold
    t = np.asarray(targets).astype(bool)
    tp = int((p & t).sum())
    fp = int((p & ~t).sum())
    fn = int((~p & t).sum())
    if tp == 0:
        return 0.0
    precision, recall = tp / (tp + fp), tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def margin_accuracy(pred_classes, true_classes, margins, eligible=None) -> float:
    """Fraction of (node, feature) positions with |pred - true| <= margin of that feature."""
    p = np.asarray(pred_classes)
    t = np.asarray(true_classes)
    if p.ndim == 1:
        p, t = p[:, None], t[:, None]
    m = np.asarray(margins)
    if m.ndim == 0:
        m = m.reshape(1)
    if m.shape[0] != p.shape[1] or any(v is None for v in np.atleast_1d(margins)):
        raise ConfigError("one margin per discrete feature is required")
    ok = np.abs(p - t) <= m[None, :]
    e = np.ones_like(ok, dtype=bool) if eligible is None else np.asarray(eligible, dtype=bool).reshape(ok.shape)
    if not e.any():
        raise EmptyEval("margin accuracy over an empty support")
    return float(ok[e].mean())


@dataclass(frozen=True)
class MetricReport:
    name: str
    values: tuple[float, ...]

    @property
    def n_folds(self) -> int:
        return len(self.values)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))

    @property
    def std(self) -> float:
        """Population standard deviation."""
        return float(np.std(self.values))

    def formatted(self, percent: bool = True) -> str:
        k = 100.0 if percent else 1.0
        return f"{self.mean * k:.2f} ± {self.std * k:.2f}"


def aggregate_folds(values: Sequence[float], name: str = "metric") -> MetricReport:
    if len(values) == 0:
        raise EmptyEval("no fold values to aggregate")
    return MetricReport(name, tuple(float(v) for v in values))


def reports_to_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "n_folds", "mean", "std", "values"])
    for r in reports:
        w.writerow([r.name, r.n_folds, repr(r.mean), repr(r.std), " ".join(repr(v) for v in r.values)])
    return buf.getvalue()


def reports_table(reports: Sequence[MetricReport], percent: bool = True) -> str:
    width = max([len(r.name) for r in reports] + [6])
    lines = [f"{'metric':<{width}}  value"]
    lines += [f"{r.name:<{width}}  {r.formatted(percent)}" for r in reports]
    return "\n".join(lines)
