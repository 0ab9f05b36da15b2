import logging

import numpy as np
from scipy.spatial.distance import cdist

from pyagcn.errors import ArgumentError, DegenerateInputError, DataValidationError
from pyagcn.graph import SparseAdjacency
from pyagcn.models import KnnConfig

logger = logging.getLogger(__name__)


def build_knn_graph(x: np.ndarray, cfg: KnnConfig) -> SparseAdjacency:
    """Undirected binary k'-NN graph, symmetrized by union.

    Each node selects its ``k_prime`` nearest other nodes; among equal
    distances the lower index wins.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n < cfg.k_prime + 1:
        raise ArgumentError(
            f"k'={cfg.k_prime} needs at least {cfg.k_prime + 1} points, got {n}"
        )
    if not np.all(np.isfinite(x)):
        raise DataValidationError("features contain non-finite values")
    if cfg.metric == "cosine" and np.any(np.linalg.norm(x, axis=1) == 0):
        raise DegenerateInputError("cosine distance is undefined for zero feature rows")

    dist = cdist(x, x, metric=cfg.metric)
    np.fill_diagonal(dist, np.inf)
    # stable sort keeps ascending index order within exact ties
    neighbors = np.argsort(dist, axis=1, kind="stable")[:, : cfg.k_prime]
    rows = np.repeat(np.arange(n), cfg.k_prime)
    selected = zip(rows.tolist(), neighbors.ravel().tolist())
    edges = sorted({(min(u, v), max(u, v)) for u, v in selected})
    graph = SparseAdjacency.from_edges(n, edges)
    logger.info(
        "built %s-NN graph (%s): n=%d, %d edges",
        cfg.k_prime,
        cfg.metric,
        n,
        graph.nnz // 2,
    )
    return graph
