"""Embedding quality metrics: leave-one-out KNN classification with
confusion-matrix statistics, per-recording aggregation, and
trustworthiness of neighborhood preservation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .neighbors import neighbor_order

__all__ = [
    "ConfusionMatrix",
    "ClassMetrics",
    "EvalReport",
    "knn_classify_loo",
    "binary_arrhythmia_labels",
    "metrics",
    "aggregate_per_patient",
    "trustworthiness",
]


@dataclass(frozen=True)
class ConfusionMatrix:
    classes: tuple  # ordered labels; rows = truth, cols = predicted
    counts: np.ndarray

    @staticmethod
    def from_labels(truth, predicted, classes=None) -> "ConfusionMatrix":
        truth = np.asarray(truth)
        predicted = np.asarray(predicted)
        if classes is None:
            classes = tuple(sorted(set(truth.tolist()) | set(predicted.tolist())))
        index = {c: i for i, c in enumerate(classes)}
        counts = np.zeros((len(classes), len(classes)), dtype=np.int64)
        for t, p in zip(truth, predicted):
            counts[index[t], index[p]] += 1
        return ConfusionMatrix(tuple(classes), counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int
    degenerate: bool  # any 0/0 ratio was reported as 0


@dataclass
class EvalReport:
    task: str
    k: int
    accuracy: float
    f1: float | None  # binary F1 (positive = abnormal); None for multiclass
    per_class: dict = field(default_factory=dict)
    confusion: ConfusionMatrix | None = None


def knn_classify_loo(Y: np.ndarray, labels, k: int, order: np.ndarray | None = None) -> np.ndarray:
    """Predict every point from the majority vote of its k nearest other points.

    Neighbors are ranked by (Euclidean distance, index).  Vote ties break
    by the smaller summed neighbor distance, then by ascending label order.
    ``order`` may carry a precomputed ``neighbor_order(Y)`` to share across
    several values of k.
    """
    Y = np.asarray(Y, dtype=np.float64)
    labels = np.asarray(labels)
    n = Y.shape[0]
    if k >= n:
        raise ValueError(f"k={k} must be below the point count {n}")
    if order is None:
        order = neighbor_order(Y)
    neighbors = order[:, :k]

    classes = sorted(set(labels.tolist()))
    class_index = {c: i for i, c in enumerate(classes)}
    lab_int = np.array([class_index[l] for l in labels.tolist()], dtype=np.int64)
    neigh_lab = lab_int[neighbors]

    counts = np.zeros((n, len(classes)), dtype=np.int64)
    rows = np.repeat(np.arange(n), k)
    np.add.at(counts, (rows, neigh_lab.ravel()), 1)

    best = counts.max(axis=1)
    tie_rows = np.flatnonzero((counts == best[:, None]).sum(axis=1) > 1)
    pred = counts.argmax(axis=1)

    if tie_rows.size:
        for i in tie_rows:
            nb = neighbors[i]
            dists = np.sqrt(((Y[nb] - Y[i]) ** 2).sum(axis=1))
            tied = np.flatnonzero(counts[i] == best[i])
            sums = [(dists[neigh_lab[i] == c].sum(), c) for c in tied]
            pred[i] = min(sums)[1]

    return np.array([classes[p] for p in pred], dtype=labels.dtype)


def binary_arrhythmia_labels(aami) -> np.ndarray:
    """Collapse AAMI superclasses to normal (N) vs abnormal (everything else)."""
    aami = np.asarray(aami)
    return np.where(aami == "N", "normal", "abnormal")


def metrics(confusion: ConfusionMatrix, positive: str | None = None) -> EvalReport:
    """Accuracy and per-class precision/recall/F1 from a confusion matrix.

    Undefined 0/0 ratios are reported as 0 and flagged.  ``positive`` names
    the class whose F1 becomes the report-level f1 (defaults to "abnormal"
    when present, else None for multiclass).
    """
    counts = confusion.counts
    total = counts.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    accuracy = float(np.trace(counts)) / float(total)

    per_class = {}
    for i, cls in enumerate(confusion.classes):
        tp = int(counts[i, i])
        fp = int(counts[:, i].sum()) - tp
        fn = int(counts[i, :].sum()) - tp
        degenerate = False
        if tp + fp == 0:
            precision, degenerate = 0.0, True
        else:
            precision = tp / (tp + fp)
        if tp + fn == 0:
            recall, degenerate = 0.0, True
        else:
            recall = tp / (tp + fn)
        if precision + recall == 0:
            f1, degenerate = 0.0, True
        else:
            f1 = 2 * precision * recall / (precision + recall)
        per_class[cls] = ClassMetrics(precision, recall, f1, tp + fn, degenerate)

    if positive is None and "abnormal" in per_class:
        positive = "abnormal"
    f1 = per_class[positive].f1 if positive in per_class else None
    return EvalReport(task="", k=0, accuracy=accuracy, f1=f1, per_class=per_class, confusion=confusion)


def aggregate_per_patient(reports: list[EvalReport]) -> dict[str, dict[str, float]]:
    """Mean and median of accuracy and F1 across per-recording reports."""
    acc = np.array([r.accuracy for r in reports], dtype=np.float64)
    out = {"accuracy": {"mean": float(acc.mean()), "median": float(np.median(acc))}}
    f1s = np.array([r.f1 for r in reports if r.f1 is not None], dtype=np.float64)
    if f1s.size:
        out["f1"] = {"mean": float(f1s.mean()), "median": float(np.median(f1s))}
    return out


def trustworthiness(X: np.ndarray, Y: np.ndarray, k: int) -> float:
    """Neighborhood-preservation score in [0, 1].

    Penalizes points that enter a low-dimensional k-neighborhood without
    being high-dimensional k-neighbors, weighted by how far down the
    high-dimensional ranking they sit:

        T = 1 - 2/(N k (2N - 3k - 1)) * sum_i sum_{j in U_k(i)} (rank(i,j) - k)

    Rank ties are broken by point index in both spaces, so any isometric
    embedding scores exactly 1.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n = X.shape[0]
    if not 1 <= k < n / 2:
        raise ValueError(f"k must satisfy 1 <= k < N/2 = {n / 2}")

    order_x = neighbor_order(X)
    order_y = neighbor_order(Y)
    rank_x = np.empty((n, n), dtype=np.int64)
    rows = np.arange(n)
    rank_x[rows[:, None], order_x] = np.arange(1, n)
    rank_x[rows, rows] = 0

    high = order_x[:, :k]
    low = order_y[:, :k]
    penalty = 0
    for i in range(n):
        missing = np.setdiff1d(low[i], high[i], assume_unique=True)
        if missing.size:
            penalty += int((rank_x[i, missing] - k).sum())
    return 1.0 - 2.0 * penalty / (n * k * (2 * n - 3 * k - 1))
