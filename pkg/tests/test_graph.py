from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from pyagcn.autodiff import Tape, finite_difference, relative_error
from pyagcn.errors import DataValidationError, DimensionError
from pyagcn.graph import (
    SparseAdjacency,
    normalize_adjacency,
    read_edge_list,
    spmm,
    spmm_counter,
    write_edge_list,
)


def random_graph(n, density, rng):
    upper = np.triu(rng.random((n, n)) < density, k=1)
    return SparseAdjacency(sp.csr_matrix((upper | upper.T).astype(float)))


def test_from_edges_is_symmetric_and_binary():
    a = SparseAdjacency.from_edges(4, [(0, 1), (2, 1), (3, 0)])
    dense = a.to_dense()
    assert np.array_equal(dense, dense.T)
    assert set(np.unique(dense)) == {0.0, 1.0}
    assert a.nnz == 6
    assert a.edges() == [(0, 1), (0, 3), (1, 2)]
    assert a.degrees().tolist() == [2.0, 2.0, 1.0, 1.0]


def test_from_edges_drops_self_loops_and_duplicates():
    with pytest.warns(UserWarning, match="self-loop"):
        a = SparseAdjacency.from_edges(3, [(0, 0), (0, 1)])
    assert a.edges() == [(0, 1)]
    with pytest.warns(UserWarning, match="duplicate"):
        b = SparseAdjacency.from_edges(3, [(0, 1), (1, 0), (1, 2)])
    assert b.edges() == [(0, 1), (1, 2)]
    assert b.to_dense().max() == 1.0


def test_from_edges_out_of_range():
    with pytest.raises(DataValidationError):
        SparseAdjacency.from_edges(2, [(0, 2)])


def test_asymmetric_matrix_rejected():
    with pytest.raises(DataValidationError, match="symmetric"):
        SparseAdjacency(np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(DataValidationError, match="square"):
        SparseAdjacency(np.zeros((2, 3)))


def test_self_loops_rejected():
    with pytest.raises(DataValidationError, match="self-loops"):
        SparseAdjacency(np.array([[1.0, 1.0], [1.0, 0.0]]))
    # normalized operators carry the identity and skip validation
    a = normalize_adjacency(SparseAdjacency.from_edges(2, [(0, 1)]))
    assert a.matrix.diagonal().all()


def test_csr_rows_sorted_without_duplicates():
    a = random_graph(20, 0.3, np.random.default_rng(0))
    for i in range(a.n):
        cols = a.col_indices[a.row_offsets[i] : a.row_offsets[i + 1]]
        assert np.all(np.diff(cols) > 0)


def test_normalize_empty_graph_is_identity():
    a = SparseAdjacency(sp.csr_matrix((3, 3)))
    assert np.array_equal(normalize_adjacency(a).to_dense(), np.eye(3))


def test_normalize_single_edge():
    a = SparseAdjacency.from_edges(2, [(0, 1)])
    assert normalize_adjacency(a).to_dense() == pytest.approx(np.full((2, 2), 0.5))


def test_normalize_path_graph_matches_dense():
    a = SparseAdjacency.from_edges(3, [(0, 1), (1, 2)])
    dense = a.to_dense() + np.eye(3)
    d = np.diag(1.0 / np.sqrt(dense.sum(axis=1)))
    expected = d @ dense @ d
    assert np.abs(normalize_adjacency(a).to_dense() - expected).max() < 1e-15


@settings(max_examples=50, deadline=None)
@given(
    n=st.integers(min_value=1, max_value=30),
    density=st.floats(min_value=0.0, max_value=1.0),
    seed=st.integers(min_value=0, max_value=2**16),
)
def test_normalize_is_exactly_symmetric(n, density, seed):
    a = random_graph(n, density, np.random.default_rng(seed))
    m = normalize_adjacency(a).matrix
    assert (m != m.T).nnz == 0
    assert m.data.min() > 0
    assert m.data.max() <= 1.0
    # every node keeps its self-loop
    assert np.all(m.diagonal() > 0)


def test_spmm_identity():
    x = np.random.default_rng(0).standard_normal((4, 3))
    tape = Tape()
    out = spmm(SparseAdjacency.identity(4), tape.constant(x))
    assert np.array_equal(out.value, x)


def test_spmm_matches_dense_and_counts_touches():
    rng = np.random.default_rng(42)
    for _ in range(200):
        n = int(rng.integers(1, 65))
        cols = int(rng.integers(1, 6))
        a = normalize_adjacency(random_graph(n, rng.random(), rng))
        x = rng.standard_normal((n, cols))
        spmm_counter.reset()
        out = spmm(a, Tape().constant(x))
        assert np.abs(out.value - a.to_dense() @ x).max() < 1e-12
        assert spmm_counter.calls == 1
        assert spmm_counter.touches == a.nnz * cols


def test_spmm_gradient():
    rng = np.random.default_rng(3)
    a = normalize_adjacency(random_graph(5, 0.5, rng))
    x = rng.standard_normal((5, 2))
    w = rng.standard_normal((5, 2))

    def loss():
        tape = Tape()
        node = tape.parameter("x", x)
        return tape, tape.sum_all(tape.hadamard(spmm(a, node), tape.constant(w)))

    tape, value = loss()
    grad = tape.backward(value)["x"]
    assert np.abs(grad - a.to_dense().T @ w).max() < 1e-12
    numeric = finite_difference(lambda: float(loss()[1].value[0, 0]), x)
    assert relative_error(grad, numeric) < 1e-6


def test_spmm_backward_is_counted():
    rng = np.random.default_rng(5)
    a = normalize_adjacency(random_graph(12, 0.4, rng))
    tape = Tape()
    x = tape.parameter("x", rng.standard_normal((12, 3)))
    spmm_counter.reset()
    loss = tape.sum_all(spmm(a, x))
    assert (spmm_counter.calls, spmm_counter.touches) == (1, a.nnz * 3)
    tape.backward(loss)
    assert (spmm_counter.calls, spmm_counter.touches) == (2, 2 * a.nnz * 3)


def test_counter_shared_across_threads():
    a = SparseAdjacency.from_edges(3, [(0, 1), (1, 2)])
    spmm_counter.reset()

    def work(_):
        for _ in range(200):
            spmm_counter.record(a.matrix, 2)

    with ThreadPoolExecutor(max_workers=4) as pool:
        list(pool.map(work, range(8)))
    assert spmm_counter.calls == 8 * 200
    assert spmm_counter.touches == 8 * 200 * a.nnz * 2


def test_spmm_dimension_mismatch():
    with pytest.raises(DimensionError):
        spmm(SparseAdjacency.identity(3), Tape().constant(np.ones((4, 2))))


def test_edge_list_round_trip(tmp_path):
    a = random_graph(12, 0.3, np.random.default_rng(1))
    path = tmp_path / "g.graph"
    write_edge_list(a, path)
    assert read_edge_list(path, 12) == a


def test_edge_list_reports_line_number(tmp_path):
    path = tmp_path / "bad.graph"
    path.write_text("0 1\n1 x\n")
    with pytest.raises(DataValidationError, match=":2:"):
        read_edge_list(path, 3)
    path.write_text("0 1\n\n# comment\n0 1 2\n")
    with pytest.raises(DataValidationError, match=":4:"):
        read_edge_list(path, 3)
    path.write_text("0 5\n")
    with pytest.raises(DataValidationError, match=":1:"):
        read_edge_list(path, 3)
