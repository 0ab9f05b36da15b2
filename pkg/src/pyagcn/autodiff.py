"""Reverse-mode automatic differentiation over dense 64-bit matrices.

A :class:`Tape` records every operation as a :class:`TapeNode` in evaluation
order. Values are always 2-D ``float64`` arrays (scalars are 1x1), rows are
samples. Calling :meth:`Tape.backward` on a scalar node walks the tape in
reverse and returns the accumulated gradient of every registered parameter.

A tape is meant to be rebuilt for each evaluation; nothing is retained between
forward passes.
"""

import threading
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from pyagcn.errors import (
    ArgumentError,
    DegenerateInputError,
    DimensionError,
    NumericalError,
)


class OpKind(Enum):
    PARAMETER = "parameter"
    CONSTANT = "constant"
    MATMUL = "matmul"
    ADD = "add"
    HADAMARD = "hadamard"
    SCALE = "scale"
    SCALE_ROWS = "scale_rows"
    ADD_BIAS = "add_bias"
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    TANH = "tanh"
    SOFTMAX_ROWS = "softmax_rows"
    L2_NORMALIZE_ROWS = "l2_normalize_rows"
    CONCAT_COLS = "concat_cols"
    SLICE_COLS = "slice_cols"
    SUM = "sum"
    FROBENIUS_SQ = "frobenius_sq"
    KL_DIVERGENCE = "kl_divergence"
    STUDENT_T = "student_t"
    SPMM = "spmm"


class TapeNode:
    __slots__ = ("tape", "id", "op", "inputs", "value", "cache", "grad", "name")

    def __init__(
        self,
        tape: "Tape",
        node_id: int,
        op: OpKind,
        inputs: Tuple[int, ...],
        value: np.ndarray,
        cache: Optional[dict] = None,
        name: Optional[str] = None,
    ):
        self.tape = tape
        self.id = node_id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.cache = cache or {}
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def __repr__(self) -> str:
        return f"TapeNode(id={self.id}, op={self.op.value}, shape={self.shape})"


def as_matrix(value) -> np.ndarray:
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 0:
        array = array.reshape(1, 1)
    elif array.ndim == 1:
        array = array.reshape(1, -1)
    elif array.ndim != 2:
        raise DimensionError(f"expected a 2-D matrix, got shape {array.shape}")
    return array


def _same_shape(op: str, a: TapeNode, b: TapeNode) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


class OpCounter:
    """Cost model of sparse products: each call adds nnz(matrix) * columns.

    Forward and backward products are both recorded. Updates hold a lock since
    concurrent training runs share one counter.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.calls = 0
        self.touches = 0

    def record(self, matrix, cols: int) -> None:
        nnz = getattr(matrix, "nnz", None)
        if nnz is None:
            nnz = int(np.count_nonzero(matrix))
        with self._lock:
            self.calls += 1
            self.touches += int(nnz) * int(cols)

    def reset(self) -> None:
        with self._lock:
            self.calls = 0
            self.touches = 0


spmm_counter = OpCounter()

_BACKWARD: Dict[OpKind, Callable] = {}


def _backward_rule(kind: OpKind):
    def register(fn):
        _BACKWARD[kind] = fn
        return fn

    return register


class Tape:
    """Single-writer computation record."""

    def __init__(self):
        self.nodes: List[TapeNode] = []
        self.parameter_ids: Dict[str, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(
        self,
        op: OpKind,
        inputs: Sequence[TapeNode],
        value: np.ndarray,
        cache: Optional[dict] = None,
        name: Optional[str] = None,
    ) -> TapeNode:
        for node in inputs:
            if node.tape is not self:
                raise ArgumentError(f"node {node.id} belongs to another tape")
        node = TapeNode(
            self, len(self.nodes), op, tuple(n.id for n in inputs), value, cache, name
        )
        self.nodes.append(node)
        return node

    # leaves ---------------------------------------------------------------
    def parameter(self, name: str, value) -> TapeNode:
        if name in self.parameter_ids:
            raise ArgumentError(f"parameter {name!r} registered twice")
        node = self._record(OpKind.PARAMETER, (), as_matrix(value), name=name)
        self.parameter_ids[name] = node.id
        return node

    def constant(self, value) -> TapeNode:
        return self._record(OpKind.CONSTANT, (), as_matrix(value))

    # linear algebra -------------------------------------------------------
    def matmul(self, a: TapeNode, b: TapeNode) -> TapeNode:
        if a.cols != b.rows:
            raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
        return self._record(OpKind.MATMUL, (a, b), a.value @ b.value)

    def spmm(self, matrix, x: TapeNode) -> TapeNode:
        """Sparse (or any ``@``-capable) constant matrix times a dense node."""
        if matrix.shape[1] != x.rows:
            raise DimensionError(
                f"spmm shape mismatch: {tuple(matrix.shape)} x {x.shape}"
            )
        spmm_counter.record(matrix, x.cols)
        value = np.asarray(matrix @ x.value, dtype=np.float64)
        return self._record(OpKind.SPMM, (x,), value, {"matrix": matrix})

    def add(self, a: TapeNode, b: TapeNode) -> TapeNode:
        _same_shape("add", a, b)
        return self._record(OpKind.ADD, (a, b), a.value + b.value)

    def hadamard(self, a: TapeNode, b: TapeNode) -> TapeNode:
        _same_shape("hadamard", a, b)
        return self._record(OpKind.HADAMARD, (a, b), a.value * b.value)

    def scale(self, x: TapeNode, factor: float) -> TapeNode:
        factor = float(factor)
        return self._record(OpKind.SCALE, (x,), x.value * factor, {"factor": factor})

    def scale_rows(self, x: TapeNode, w: TapeNode) -> TapeNode:
        """Multiply row i of ``x`` by the scalar ``w[i, 0]``."""
        if w.shape != (x.rows, 1):
            raise DimensionError(
                f"scale_rows expects weights of shape ({x.rows}, 1), got {w.shape}"
            )
        return self._record(OpKind.SCALE_ROWS, (x, w), x.value * w.value)

    def add_bias(self, x: TapeNode, b: TapeNode) -> TapeNode:
        if b.shape != (1, x.cols):
            raise DimensionError(
                f"add_bias expects bias of shape (1, {x.cols}), got {b.shape}"
            )
        return self._record(OpKind.ADD_BIAS, (x, b), x.value + b.value)

    # elementwise ----------------------------------------------------------
    def relu(self, x: TapeNode) -> TapeNode:
        return self._record(OpKind.RELU, (x,), np.maximum(x.value, 0.0))

    def leaky_relu(self, x: TapeNode, slope: float) -> TapeNode:
        if not 0.0 < slope < 1.0:
            raise ArgumentError(f"leaky_relu slope must lie in (0, 1), got {slope}")
        value = np.where(x.value > 0, x.value, slope * x.value)
        return self._record(OpKind.LEAKY_RELU, (x,), value, {"slope": float(slope)})

    def tanh(self, x: TapeNode) -> TapeNode:
        return self._record(OpKind.TANH, (x,), np.tanh(x.value))

    # row normalizations ---------------------------------------------------
    def softmax_rows(self, x: TapeNode) -> TapeNode:
        shifted = x.value - x.value.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        return self._record(
            OpKind.SOFTMAX_ROWS, (x,), e / e.sum(axis=1, keepdims=True)
        )

    def l2_normalize_rows(self, x: TapeNode) -> TapeNode:
        norms = np.sqrt((x.value * x.value).sum(axis=1, keepdims=True))
        if np.any(norms == 0):
            row = int(np.flatnonzero(norms[:, 0] == 0)[0])
            raise DegenerateInputError(f"cannot l2-normalize zero row {row}")
        return self._record(
            OpKind.L2_NORMALIZE_ROWS, (x,), x.value / norms, {"norms": norms}
        )

    # structure ------------------------------------------------------------
    def concat_cols(self, parts: Sequence[TapeNode]) -> TapeNode:
        if not parts:
            raise ArgumentError("concat_cols needs at least one part")
        rows = {p.rows for p in parts}
        if len(rows) != 1:
            raise DimensionError(
                f"concat_cols row-count mismatch: {[p.shape for p in parts]}"
            )
        offsets = np.cumsum([0] + [p.cols for p in parts]).tolist()
        value = np.concatenate([p.value for p in parts], axis=1)
        return self._record(OpKind.CONCAT_COLS, parts, value, {"offsets": offsets})

    def slice_cols(self, x: TapeNode, start: int, stop: int) -> TapeNode:
        if not 0 <= start < stop <= x.cols:
            raise DimensionError(
                f"column slice [{start}:{stop}] out of range for {x.shape}"
            )
        return self._record(
            OpKind.SLICE_COLS,
            (x,),
            x.value[:, start:stop].copy(),
            {"start": start, "stop": stop, "cols": x.cols},
        )

    # reductions and losses ------------------------------------------------
    def sum_all(self, x: TapeNode) -> TapeNode:
        return self._record(OpKind.SUM, (x,), as_matrix(x.value.sum()))

    def frobenius_sq_loss(self, a: TapeNode, b: TapeNode) -> TapeNode:
        """Raw squared Frobenius norm of ``a - b`` (no averaging)."""
        _same_shape("frobenius_sq_loss", a, b)
        diff = a.value - b.value
        return self._record(
            OpKind.FROBENIUS_SQ, (a, b), as_matrix((diff * diff).sum()), {"diff": diff}
        )

    def kl_divergence(self, p: np.ndarray, q: TapeNode) -> TapeNode:
        """sum p * log(p / q) with ``p`` held constant and 0 * log 0 = 0."""
        p = as_matrix(p)
        if p.shape != q.shape:
            raise DimensionError(f"kl_divergence shape mismatch: {p.shape} vs {q.shape}")
        support = p > 0
        if np.any(q.value[support] <= 0):
            raise NumericalError("kl_divergence: nonpositive prediction where target > 0")
        value = float(
            (p[support] * (np.log(p[support]) - np.log(q.value[support]))).sum()
        )
        return self._record(
            OpKind.KL_DIVERGENCE, (q,), as_matrix(value), {"p": p, "support": support}
        )

    def student_t(self, h: TapeNode, mu: TapeNode, alpha: float) -> TapeNode:
        """Row-normalized Student's t kernel between rows of ``h`` and ``mu``."""
        if h.cols != mu.cols:
            raise DimensionError(f"student_t shape mismatch: {h.shape} vs {mu.shape}")
        if alpha <= 0:
            raise ArgumentError(f"alpha must be positive, got {alpha}")
        delta = h.value[:, None, :] - mu.value[None, :, :]
        dist_sq = (delta * delta).sum(axis=2)
        base = 1.0 + dist_sq / alpha
        kernel = base ** (-(alpha + 1.0) / 2.0)
        q = kernel / kernel.sum(axis=1, keepdims=True)
        return self._record(
            OpKind.STUDENT_T, (h, mu), q, {"base": base, "alpha": float(alpha)}
        )

    # backward -------------------------------------------------------------
    def backward(self, loss: TapeNode) -> Dict[str, np.ndarray]:
        if loss.tape is not self:
            raise ArgumentError("loss node belongs to another tape")
        if loss.shape != (1, 1):
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: List[Optional[np.ndarray]] = [None] * len(self.nodes)
        grads[loss.id] = np.ones((1, 1))
        for node in reversed(self.nodes[: loss.id + 1]):
            g = grads[node.id]
            if g is None or not node.inputs:
                continue
            input_grads = _BACKWARD[node.op](self, node, g)
            for input_id, input_grad in zip(node.inputs, input_grads):
                if input_grad is None:
                    continue
                if grads[input_id] is None:
                    grads[input_id] = input_grad
                else:
                    grads[input_id] = grads[input_id] + input_grad
        result = {}
        for name, node_id in self.parameter_ids.items():
            node = self.nodes[node_id]
            g = grads[node_id]
            node.grad = np.zeros_like(node.value) if g is None else g
            result[name] = node.grad
        return result


def _value(tape: Tape, node_id: int) -> np.ndarray:
    return tape.nodes[node_id].value


@_backward_rule(OpKind.MATMUL)
def _matmul_backward(tape, node, g):
    a, b = (_value(tape, i) for i in node.inputs)
    return g @ b.T, a.T @ g


@_backward_rule(OpKind.SPMM)
def _spmm_backward(tape, node, g):
    transposed = node.cache["matrix"].T
    spmm_counter.record(transposed, g.shape[1])
    return (np.asarray(transposed @ g, dtype=np.float64),)


@_backward_rule(OpKind.ADD)
def _add_backward(tape, node, g):
    return g, g


@_backward_rule(OpKind.HADAMARD)
def _hadamard_backward(tape, node, g):
    a, b = (_value(tape, i) for i in node.inputs)
    return g * b, g * a


@_backward_rule(OpKind.SCALE)
def _scale_backward(tape, node, g):
    return (g * node.cache["factor"],)


@_backward_rule(OpKind.SCALE_ROWS)
def _scale_rows_backward(tape, node, g):
    x, w = (_value(tape, i) for i in node.inputs)
    return g * w, (g * x).sum(axis=1, keepdims=True)


@_backward_rule(OpKind.ADD_BIAS)
def _add_bias_backward(tape, node, g):
    return g, g.sum(axis=0, keepdims=True)


@_backward_rule(OpKind.RELU)
def _relu_backward(tape, node, g):
    x = _value(tape, node.inputs[0])
    return (g * (x > 0),)


@_backward_rule(OpKind.LEAKY_RELU)
def _leaky_relu_backward(tape, node, g):
    x = _value(tape, node.inputs[0])
    return (g * np.where(x > 0, 1.0, node.cache["slope"]),)


@_backward_rule(OpKind.TANH)
def _tanh_backward(tape, node, g):
    return (g * (1.0 - node.value * node.value),)


@_backward_rule(OpKind.SOFTMAX_ROWS)
def _softmax_backward(tape, node, g):
    y = node.value
    return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


@_backward_rule(OpKind.L2_NORMALIZE_ROWS)
def _l2_normalize_backward(tape, node, g):
    y = node.value
    return ((g - y * (g * y).sum(axis=1, keepdims=True)) / node.cache["norms"],)


@_backward_rule(OpKind.CONCAT_COLS)
def _concat_backward(tape, node, g):
    offsets = node.cache["offsets"]
    return tuple(g[:, offsets[i] : offsets[i + 1]] for i in range(len(node.inputs)))


@_backward_rule(OpKind.SLICE_COLS)
def _slice_backward(tape, node, g):
    out = np.zeros((g.shape[0], node.cache["cols"]))
    out[:, node.cache["start"] : node.cache["stop"]] = g
    return (out,)


@_backward_rule(OpKind.SUM)
def _sum_backward(tape, node, g):
    x = _value(tape, node.inputs[0])
    return (np.full_like(x, g[0, 0]),)


@_backward_rule(OpKind.FROBENIUS_SQ)
def _frobenius_backward(tape, node, g):
    diff = node.cache["diff"]
    scaled = 2.0 * g[0, 0] * diff
    return scaled, -scaled


@_backward_rule(OpKind.KL_DIVERGENCE)
def _kl_backward(tape, node, g):
    q = _value(tape, node.inputs[0])
    p, support = node.cache["p"], node.cache["support"]
    out = np.zeros_like(q)
    out[support] = -g[0, 0] * p[support] / q[support]
    return (out,)


@_backward_rule(OpKind.STUDENT_T)
def _student_t_backward(tape, node, g):
    h, mu = (_value(tape, i) for i in node.inputs)
    q, base, alpha = node.value, node.cache["base"], node.cache["alpha"]
    # gradient w.r.t. log of the unnormalized kernel, then w.r.t. squared distance
    d_log_kernel = q * (g - (g * q).sum(axis=1, keepdims=True))
    e = d_log_kernel * (-(alpha + 1.0) / (2.0 * alpha)) / base
    grad_h = 2.0 * (e.sum(axis=1, keepdims=True) * h - e @ mu)
    grad_mu = -2.0 * (e.T @ h - e.sum(axis=0)[:, None] * mu)
    return grad_h, grad_mu


def finite_difference(
    fn: Callable[[], float], array: np.ndarray, h: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of ``fn`` w.r.t. ``array``, perturbed in place."""
    grad = np.zeros_like(array, dtype=np.float64)
    flat = array.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = fn()
        flat[i] = original - h
        minus = fn()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)
