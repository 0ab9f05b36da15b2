"""Clustering evaluation: ACC, NMI, ARI, macro-F1 and multi-run aggregation."""

from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.metrics import adjusted_rand_score, f1_score, normalized_mutual_info_score
from sklearn.metrics.cluster import contingency_matrix

from pyagcn.errors import ArgumentError, DataValidationError
from pyagcn.models import ClusteringReport, MetricSummary, RunMetrics

NMI_NORMALIZER = "arithmetic"


class ContingencyTable:
    """Counts of (true class, predicted cluster) pairs."""

    def __init__(self, y_true: Sequence[int], y_pred: Sequence[int]):
        y_true, y_pred = _check_labels(y_true, y_pred)
        self.classes = np.unique(y_true)
        self.clusters = np.unique(y_pred)
        self.counts = contingency_matrix(y_true, y_pred)
        self.n = int(y_true.size)


def _check_labels(y_true, y_pred):
    y_true = np.asarray(y_true).ravel()
    y_pred = np.asarray(y_pred).ravel()
    if y_true.shape != y_pred.shape:
        raise DataValidationError(
            f"label length mismatch: {y_true.size} true vs {y_pred.size} predicted"
        )
    if y_true.size == 0:
        raise DataValidationError("cannot evaluate empty labelings")
    return y_true, y_pred


def hungarian_assignment(cost: np.ndarray) -> np.ndarray:
    """Column assigned to each row in a minimum-cost perfect matching."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise ArgumentError(f"cost matrix must be square, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise ArgumentError("cost matrix contains non-finite entries")
    rows, cols = linear_sum_assignment(cost)
    permutation = np.empty(cost.shape[0], dtype=np.int64)
    permutation[rows] = cols
    return permutation


def cluster_to_class(y_true, y_pred) -> Dict[int, Optional[int]]:
    """Accuracy-optimal mapping; surplus clusters map to None."""
    table = ContingencyTable(y_true, y_pred)
    # columns ordered by their counts so ties never depend on cluster ids
    order = np.lexsort(table.counts[::-1])
    counts = table.counts[:, order]
    size = max(counts.shape)
    padded = np.zeros((size, size))
    padded[: counts.shape[0], : counts.shape[1]] = counts
    # rows are classes, columns clusters
    assignment = hungarian_assignment(-padded)
    mapping: Dict[int, Optional[int]] = {int(c): None for c in table.clusters}
    for class_idx, column in enumerate(assignment):
        if class_idx < len(table.classes) and column < len(order):
            cluster = table.clusters[order[column]]
            mapping[int(cluster)] = int(table.classes[class_idx])
    return mapping


def _mapped_predictions(y_true: np.ndarray, y_pred: np.ndarray) -> np.ndarray:
    mapping = cluster_to_class(y_true, y_pred)
    unmatched = int(np.min(y_true)) - 1
    return np.array(
        [mapping[int(c)] if mapping[int(c)] is not None else unmatched for c in y_pred]
    )


def accuracy(y_true, y_pred) -> float:
    y_true, y_pred = _check_labels(y_true, y_pred)
    return float(np.mean(_mapped_predictions(y_true, y_pred) == y_true))


def nmi(y_true, y_pred) -> float:
    y_true, y_pred = _check_labels(y_true, y_pred)
    return float(
        normalized_mutual_info_score(y_true, y_pred, average_method=NMI_NORMALIZER)
    )


def ari(y_true, y_pred) -> float:
    y_true, y_pred = _check_labels(y_true, y_pred)
    return float(adjusted_rand_score(y_true, y_pred))


def macro_f1(y_true, y_pred) -> float:
    y_true, y_pred = _check_labels(y_true, y_pred)
    classes = np.unique(y_true)
    mapped = _mapped_predictions(y_true, y_pred)
    return float(
        f1_score(y_true, mapped, labels=classes, average="macro", zero_division=0)
    )


def evaluate(y_true, y_pred) -> RunMetrics:
    return RunMetrics(
        acc=accuracy(y_true, y_pred),
        nmi=nmi(y_true, y_pred),
        ari=ari(y_true, y_pred),
        f1=macro_f1(y_true, y_pred),
    )


def aggregate(
    reports: List[RunMetrics], metadata: Optional[Dict] = None
) -> ClusteringReport:
    """Mean and population standard deviation of each metric across runs."""
    if not reports:
        raise ArgumentError("cannot aggregate an empty list of runs")
    summaries = {
        name: MetricSummary.from_runs([getattr(r, name) for r in reports])
        for name in ("acc", "nmi", "ari", "f1")
    }
    meta = {"nmi_normalizer": NMI_NORMALIZER, "ari": "adjusted"}
    meta.update(metadata or {})
    return ClusteringReport(**summaries, metadata=meta)
