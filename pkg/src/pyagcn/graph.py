"""Sparse symmetric adjacency storage and graph propagation."""

import logging
import warnings
from pathlib import Path
from typing import Iterable, List, Tuple, Union

import numpy as np
import scipy.sparse as sp

from pyagcn.autodiff import OpCounter, TapeNode, spmm_counter  # noqa: F401
from pyagcn.errors import DataValidationError, DimensionError

logger = logging.getLogger(__name__)


class SparseAdjacency:
    """Immutable symmetric CSR matrix with sorted, duplicate-free rows."""

    def __init__(self, matrix, validate: bool = True):
        csr = sp.csr_matrix(matrix, dtype=np.float64, copy=True)
        csr.sum_duplicates()
        csr.sort_indices()
        csr.eliminate_zeros()
        if csr.shape[0] != csr.shape[1]:
            raise DataValidationError(f"adjacency must be square, got {csr.shape}")
        if validate:
            if csr.nnz and csr.data.min() < 0:
                raise DataValidationError("adjacency values must be nonnegative")
            if abs(csr - csr.T).sum() > 0:
                raise DataValidationError("adjacency matrix is not symmetric")
            if csr.diagonal().any():
                raise DataValidationError(
                    "adjacency has self-loops; normalization adds the identity itself"
                )
        self._matrix = csr

    @classmethod
    def from_edges(
        cls, n: int, edges: Iterable[Tuple[int, int]]
    ) -> "SparseAdjacency":
        """Binary undirected adjacency from (u, v) pairs; both directions stored."""
        pairs = np.asarray(list(edges), dtype=np.int64).reshape(-1, 2)
        if pairs.size and (pairs.min() < 0 or pairs.max() >= n):
            raise DataValidationError(f"edge endpoint outside [0, {n})")
        loops = pairs[:, 0] == pairs[:, 1]
        if loops.any():
            warnings.warn(f"dropping {int(loops.sum())} self-loop(s) from edge list")
            pairs = pairs[~loops]
        rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
        cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
        matrix = sp.coo_matrix((np.ones(rows.size), (rows, cols)), shape=(n, n)).tocsr()
        if matrix.nnz and matrix.data.max() > 1:
            warnings.warn("duplicate edges collapsed to a single binary edge")
            matrix.data[:] = 1.0
        return cls(matrix)

    @classmethod
    def identity(cls, n: int) -> "SparseAdjacency":
        """Propagation operator that leaves features unchanged (not a raw graph)."""
        return cls(sp.identity(n, format="csr"), validate=False)

    @property
    def n(self) -> int:
        return self._matrix.shape[0]

    @property
    def nnz(self) -> int:
        return self._matrix.nnz

    @property
    def row_offsets(self) -> np.ndarray:
        return self._matrix.indptr

    @property
    def col_indices(self) -> np.ndarray:
        return self._matrix.indices

    @property
    def values(self) -> np.ndarray:
        return self._matrix.data

    @property
    def matrix(self) -> sp.csr_matrix:
        return self._matrix

    @property
    def shape(self) -> Tuple[int, int]:
        return self._matrix.shape

    def degrees(self) -> np.ndarray:
        return np.asarray(self._matrix.sum(axis=1)).ravel()

    def edges(self) -> List[Tuple[int, int]]:
        """Each undirected off-diagonal edge once, as (u, v) with u < v."""
        upper = sp.triu(self._matrix, k=1).tocoo()
        order = np.lexsort((upper.col, upper.row))
        return [(int(upper.row[i]), int(upper.col[i])) for i in order]

    def to_dense(self) -> np.ndarray:
        return self._matrix.toarray()

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseAdjacency):
            return NotImplemented
        return self.shape == other.shape and (self._matrix != other._matrix).nnz == 0

    def __repr__(self) -> str:
        return f"SparseAdjacency(n={self.n}, nnz={self.nnz})"


def normalize_adjacency(a: SparseAdjacency) -> SparseAdjacency:
    """D^-1/2 (A + I) D^-1/2 with D the degree matrix of A + I."""
    if a.n < 1:
        raise DataValidationError("cannot normalize an empty graph")
    with_loops = a.matrix + sp.identity(a.n, format="csr")
    inv_sqrt = 1.0 / np.sqrt(np.asarray(with_loops.sum(axis=1)).ravel())
    d = sp.diags(inv_sqrt)
    normalized = (d @ with_loops @ d).tocsr()
    # exact symmetry, independent of floating-point evaluation order
    normalized = (normalized + normalized.T) * 0.5
    return SparseAdjacency(normalized, validate=False)


def spmm(s: SparseAdjacency, x: TapeNode) -> TapeNode:
    """Differentiable ``s @ x``; the backward rule multiplies by ``s.T``."""
    if s.n != x.rows:
        raise DimensionError(f"spmm dimension mismatch: graph n={s.n}, x {x.shape}")
    return x.tape.spmm(s.matrix, x)


def read_text_lines(path: Union[str, Path]) -> List[str]:
    """Lines of a UTF-8 text file; undecodable bytes are a data error."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            return f.read().splitlines()
    except UnicodeDecodeError as exc:
        raise DataValidationError(
            f"{path}: not a UTF-8 text file (byte {exc.start}: {exc.reason})"
        ) from None


def read_edge_list(path: Union[str, Path], n: int) -> SparseAdjacency:
    """Read whitespace-separated ``u v`` pairs (0-based, undirected, once each)."""
    edges = []
    for line_no, line in enumerate(read_text_lines(path), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        parts = stripped.split()
        if len(parts) != 2:
            raise DataValidationError(
                f"{path}:{line_no}: expected 'u v', got {stripped!r}"
            )
        try:
            u, v = int(parts[0]), int(parts[1])
        except ValueError:
            raise DataValidationError(
                f"{path}:{line_no}: non-integer node id in {stripped!r}"
            ) from None
        if not (0 <= u < n and 0 <= v < n):
            raise DataValidationError(
                f"{path}:{line_no}: node id outside [0, {n})"
            )
        edges.append((u, v))
    logger.debug("read %d edges from %s", len(edges), path)
    return SparseAdjacency.from_edges(n, edges)


def write_edge_list(a: SparseAdjacency, path: Union[str, Path]) -> None:
    with open(path, "w") as f:
        for u, v in a.edges():
            f.write(f"{u} {v}\n")
