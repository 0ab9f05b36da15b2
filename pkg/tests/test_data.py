import numpy as np
import pytest
from scipy.sparse.csgraph import connected_components

from pyagcn.data import (
    Dataset,
    fingerprint,
    generate_synthetic,
    load_dataset,
    read_labels,
    read_matrix,
    save_dataset,
    standardize,
    write_labels,
    write_matrix,
)
from pyagcn.errors import DataValidationError
from pyagcn.graph import SparseAdjacency


def test_load_features_only(tmp_path):
    path = tmp_path / "x.features"
    path.write_text("3 2\n1 2\n3 4\n5.5 -6e-1\n")
    dataset = load_dataset(path)
    assert dataset.adjacency is None
    assert dataset.labels is None
    assert dataset.features.tolist() == [[1, 2], [3, 4], [5.5, -0.6]]
    assert dataset.name == "x"
    assert dataset.describe()["samples"] == 3


def test_label_count_mismatch(tmp_path):
    features = tmp_path / "x.features"
    write_matrix(np.zeros((4, 2)), features)
    labels = tmp_path / "x.labels"
    write_labels([0, 1, 0], labels)
    with pytest.raises(DataValidationError, match="3 entries.*4 rows"):
        load_dataset(features, label_path=labels)


def test_graph_size_mismatch():
    with pytest.raises(DataValidationError, match="graph has 3 nodes"):
        Dataset(np.zeros((4, 2)), SparseAdjacency.identity(3))


def test_round_trip_is_bit_identical(tmp_path):
    dataset = generate_synthetic(3, 10, 0.5, 0.05, 4, 3.0, seed=5)
    paths = save_dataset(dataset, tmp_path)
    loaded = load_dataset(paths["features"], paths["graph"], paths["labels"])
    assert np.array_equal(loaded.features, dataset.features)
    assert loaded.adjacency == dataset.adjacency
    assert np.array_equal(loaded.labels, dataset.labels)
    assert fingerprint(loaded) == fingerprint(dataset)


def test_matrix_file_errors(tmp_path):
    path = tmp_path / "bad.features"
    path.write_text("2 2\n1 2\n3\n")
    with pytest.raises(DataValidationError, match=":3:"):
        read_matrix(path)
    path.write_text("2 2\n1 2\n3 abc\n")
    with pytest.raises(DataValidationError, match=":3:"):
        read_matrix(path)
    path.write_text("2 two\n")
    with pytest.raises(DataValidationError, match=":1:"):
        read_matrix(path)
    path.write_text("3 1\n1\n2\n")
    with pytest.raises(DataValidationError, match="3 rows, found 2"):
        read_matrix(path)
    for header in ("-1 2\n", "0 2\n", "2 0\n"):
        path.write_text(header)
        with pytest.raises(DataValidationError, match=":1: header dimensions"):
            read_matrix(path)


def test_label_file_errors(tmp_path):
    path = tmp_path / "bad.labels"
    path.write_text("0\n1\none\n")
    with pytest.raises(DataValidationError, match=":3:"):
        read_labels(path)
    path.write_bytes(b"0\n\xff\xfe\n")
    with pytest.raises(DataValidationError, match="not a UTF-8 text file"):
        read_labels(path)


def test_cliques_when_blocks_are_isolated():
    dataset = generate_synthetic(3, 5, 1.0, 0.0, 2, 1.0, seed=0)
    count, components = connected_components(dataset.adjacency.matrix, directed=False)
    assert count == 3
    assert np.array_equal(components, dataset.labels)
    assert dataset.adjacency.nnz == 3 * 5 * 4


def test_synthetic_is_deterministic():
    a = generate_synthetic(2, 30, 0.5, 0.02, 2, 10.0, seed=1)
    b = generate_synthetic(2, 30, 0.5, 0.02, 2, 10.0, seed=1)
    assert np.array_equal(a.features, b.features)
    assert a.adjacency == b.adjacency
    c = generate_synthetic(2, 30, 0.5, 0.02, 2, 10.0, seed=2)
    assert fingerprint(a) != fingerprint(c)


def test_synthetic_block_means():
    dataset = generate_synthetic(2, 500, 0.1, 0.0, 2, 10.0, seed=3)
    means = [dataset.features[dataset.labels == b].mean(axis=0) for b in range(2)]
    assert np.linalg.norm(means[0] - means[1]) == pytest.approx(10.0, abs=0.3)


@pytest.mark.parametrize("p_in, p_out", [(0.5, 0.5), (0.2, 0.4), (1.5, 0.1), (0.5, -0.1)])
def test_synthetic_rejects_probabilities(p_in, p_out):
    with pytest.raises(DataValidationError):
        generate_synthetic(2, 5, p_in, p_out, 2, 1.0)


def test_standardize():
    x = np.array([[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]])
    with pytest.warns(UserWarning, match="constant"):
        z = standardize(x)
    assert z[:, 0] == pytest.approx([-np.sqrt(1.5), 0.0, np.sqrt(1.5)])
    assert not z[:, 1].any()
