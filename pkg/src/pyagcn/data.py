"""Dataset containers, plain-text file formats and the SBM generator.

Formats:
  matrix  header ``n d`` then n rows of d whitespace-separated floats
  labels  one integer per line
  graph   one undirected ``u v`` edge per line (see :mod:`pyagcn.graph`)
"""

import hashlib
import logging
import warnings
from pathlib import Path
from typing import Dict, Optional, Union

import numpy as np
import scipy.sparse as sp

from pyagcn.errors import DataValidationError
from pyagcn.graph import (
    SparseAdjacency,
    read_edge_list,
    read_text_lines,
    write_edge_list,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class Dataset:
    def __init__(
        self,
        features: np.ndarray,
        adjacency: Optional[SparseAdjacency] = None,
        labels: Optional[np.ndarray] = None,
        name: str = "dataset",
    ):
        self.features = np.asarray(features, dtype=np.float64)
        if self.features.ndim != 2:
            raise DataValidationError(
                f"features must be a 2-D matrix, got shape {self.features.shape}"
            )
        n = self.features.shape[0]
        if adjacency is not None and adjacency.n != n:
            raise DataValidationError(
                f"graph has {adjacency.n} nodes but features have {n} rows"
            )
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64).ravel()
            if labels.size != n:
                raise DataValidationError(
                    f"label file has {labels.size} entries but features have {n} rows"
                )
        self.adjacency = adjacency
        self.labels = labels
        self.name = name

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> Optional[int]:
        return None if self.labels is None else int(np.unique(self.labels).size)

    def describe(self) -> Dict:
        return {
            "name": self.name,
            "samples": self.n,
            "dimension": self.d,
            "classes": self.num_classes,
            "edges": None if self.adjacency is None else self.adjacency.nnz // 2,
        }

    def __repr__(self) -> str:
        return f"Dataset({self.describe()})"


def read_matrix(path: PathLike) -> np.ndarray:
    lines = read_text_lines(path)
    if not lines:
        raise DataValidationError(f"{path}: empty matrix file")
    header = lines[0].split()
    try:
        n, d = (int(v) for v in header)
    except ValueError:
        raise DataValidationError(
            f"{path}:1: header must be 'n d', got {lines[0]!r}"
        ) from None
    if n < 1 or d < 1:
        raise DataValidationError(
            f"{path}:1: header dimensions must be positive, got {n} {d}"
        )
    matrix = np.empty((n, d), dtype=np.float64)
    row = 0
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if row >= n:
            raise DataValidationError(f"{path}:{line_no}: more than {n} rows")
        parts = line.split()
        if len(parts) != d:
            raise DataValidationError(
                f"{path}:{line_no}: expected {d} values, got {len(parts)}"
            )
        try:
            matrix[row] = [float(v) for v in parts]
        except ValueError:
            raise DataValidationError(
                f"{path}:{line_no}: malformed number in {line.strip()!r}"
            ) from None
        row += 1
    if row != n:
        raise DataValidationError(f"{path}: header declares {n} rows, found {row}")
    return matrix


def write_matrix(matrix: np.ndarray, path: PathLike) -> None:
    matrix = np.asarray(matrix, dtype=np.float64)
    with open(path, "w") as f:
        f.write(f"{matrix.shape[0]} {matrix.shape[1]}\n")
        for row in matrix:
            # repr round-trips float64 exactly
            f.write(" ".join(repr(float(v)) for v in row) + "\n")


def read_labels(path: PathLike) -> np.ndarray:
    labels = []
    for line_no, line in enumerate(read_text_lines(path), start=1):
        stripped = line.strip()
        if not stripped:
            continue
        try:
            labels.append(int(stripped))
        except ValueError:
            raise DataValidationError(
                f"{path}:{line_no}: expected an integer label, got {stripped!r}"
            ) from None
    return np.asarray(labels, dtype=np.int64)


def write_labels(labels: np.ndarray, path: PathLike) -> None:
    with open(path, "w") as f:
        for label in np.asarray(labels).ravel():
            f.write(f"{int(label)}\n")


def load_dataset(
    feature_path: PathLike,
    graph_path: Optional[PathLike] = None,
    label_path: Optional[PathLike] = None,
    name: Optional[str] = None,
) -> Dataset:
    features = read_matrix(feature_path)
    n = features.shape[0]
    adjacency = None if graph_path is None else read_edge_list(graph_path, n)
    labels = None if label_path is None else read_labels(label_path)
    dataset = Dataset(features, adjacency, labels, name or Path(feature_path).stem)
    logger.info("loaded %r", dataset)
    return dataset


def save_dataset(dataset: Dataset, directory: PathLike) -> Dict[str, Path]:
    """Write ``<name>.features``, ``<name>.graph`` and ``<name>.labels``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {"features": directory / f"{dataset.name}.features"}
    write_matrix(dataset.features, paths["features"])
    if dataset.adjacency is not None:
        paths["graph"] = directory / f"{dataset.name}.graph"
        write_edge_list(dataset.adjacency, paths["graph"])
    if dataset.labels is not None:
        paths["labels"] = directory / f"{dataset.name}.labels"
        write_labels(dataset.labels, paths["labels"])
    return paths


def generate_synthetic(
    blocks: int,
    per_block: int,
    p_in: float,
    p_out: float,
    feat_dim: int,
    sep: float,
    seed: int = 0,
) -> Dataset:
    """Stochastic block model graph with unit-variance Gaussian block features.

    Block means sit ``sep`` apart: on scaled axes when ``blocks <= feat_dim``,
    otherwise evenly spaced along the first axis.
    """
    if not 0 <= p_out < p_in <= 1:
        raise DataValidationError(f"need 0 <= p_out < p_in <= 1, got {p_out}, {p_in}")
    if blocks < 1 or per_block < 1 or feat_dim < 1 or sep < 0:
        raise DataValidationError("blocks, per_block, feat_dim must be positive")
    rng = np.random.default_rng(seed)
    n = blocks * per_block
    labels = np.repeat(np.arange(blocks), per_block)

    same = labels[:, None] == labels[None, :]
    prob = np.where(same, p_in, p_out)
    draws = rng.random((n, n))
    upper = np.triu(draws < prob, k=1)
    adjacency = SparseAdjacency(sp.csr_matrix((upper | upper.T).astype(np.float64)))

    means = np.zeros((blocks, feat_dim))
    if blocks <= feat_dim:
        means[np.arange(blocks), np.arange(blocks)] = sep / np.sqrt(2.0)
    else:
        means[:, 0] = sep * np.arange(blocks)
    features = means[labels] + rng.standard_normal((n, feat_dim))
    name = f"sbm{blocks}x{per_block}"
    return Dataset(features, adjacency, labels, name)


def standardize(x: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance columns; constant columns are only centered."""
    x = np.asarray(x, dtype=np.float64)
    std = x.std(axis=0)
    constant = std == 0
    if constant.any():
        warnings.warn(f"{int(constant.sum())} constant feature column(s) left unscaled")
        std = np.where(constant, 1.0, std)
    return (x - x.mean(axis=0)) / std


def fingerprint(dataset: Dataset) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(dataset.features).tobytes())
    digest.update(str(dataset.features.shape).encode())
    if dataset.adjacency is not None:
        m = dataset.adjacency.matrix
        for part in (m.indptr, m.indices, m.data):
            digest.update(np.ascontiguousarray(part).tobytes())
    if dataset.labels is not None:
        digest.update(dataset.labels.tobytes())
    return digest.hexdigest()
