"""AGCN forward pass: auto-encoder, attention-fused GCN stack and objectives.

Samples are rows, so every linear map is ``H @ W + b`` with ``W`` shaped
(fan_in, fan_out). Layer indices follow the encoder: the GCN stack produces
Z_1..Z_l, with Z_1 computed from X by ``gcn_w0`` and Z_{i+1} from the fused
Z'_i by ``gcn_w{i}``.
"""

import logging
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from pyagcn.autodiff import Tape, TapeNode
from pyagcn.errors import (
    DataValidationError,
    DegenerateInputError,
    DimensionError,
    NumericalError,
)
from pyagcn.graph import SparseAdjacency, spmm
from pyagcn.models import AgcnConfig

logger = logging.getLogger(__name__)


class AgcnParams:
    """Named, ordered collection of every trainable matrix.

    Names: ``enc_w{i}``/``enc_b{i}`` and ``dec_w{i}``/``dec_b{i}`` for
    i=1..l, ``gcn_w{i}`` for i=0..l-1, ``attn_h_w{i}`` for i=1..l,
    ``attn_s_w``, ``pred_w`` and, once initialized, ``centroids``.
    """

    def __init__(self, tensors: Dict[str, np.ndarray]):
        self.tensors: Dict[str, np.ndarray] = dict(tensors)

    @classmethod
    def initialize(cls, config: AgcnConfig, seed: int) -> "AgcnParams":
        rng = np.random.default_rng(seed)
        dims = config.layer_dims
        l = config.num_layers
        tensors: Dict[str, np.ndarray] = {}

        def uniform(fan_in: int, fan_out: int, rows: Optional[int] = None) -> np.ndarray:
            bound = 1.0 / np.sqrt(fan_in)
            shape = (fan_in if rows is None else rows, fan_out)
            return rng.uniform(-bound, bound, size=shape)

        for i in range(1, l + 1):
            tensors[f"enc_w{i}"] = uniform(dims[i - 1], dims[i])
            tensors[f"enc_b{i}"] = uniform(dims[i - 1], dims[i], rows=1)
        mirrored = dims[::-1]
        for i in range(1, l + 1):
            tensors[f"dec_w{i}"] = uniform(mirrored[i - 1], mirrored[i])
            tensors[f"dec_b{i}"] = uniform(mirrored[i - 1], mirrored[i], rows=1)
        for i in range(0, l):
            tensors[f"gcn_w{i}"] = uniform(dims[i], dims[i + 1])
        for i in range(1, l + 1):
            tensors[f"attn_h_w{i}"] = uniform(2 * dims[i], 2)
        scale_total = sum(config.scale_dims)
        tensors["attn_s_w"] = uniform(scale_total, l + 1)
        tensors["pred_w"] = uniform(prediction_input_dim(config), config.k)
        return cls(tensors)

    @property
    def has_centroids(self) -> bool:
        return "centroids" in self.tensors

    def set_centroids(self, centroids: np.ndarray) -> None:
        self.tensors["centroids"] = np.array(centroids, dtype=np.float64)

    def ae_names(self) -> List[str]:
        return [n for n in self.tensors if n.startswith(("enc_", "dec_"))]

    def names(self) -> List[str]:
        return list(self.tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def copy(self) -> "AgcnParams":
        return AgcnParams({k: v.copy() for k, v in self.tensors.items()})

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "wb") as f:
            np.savez(f, **self.tensors)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "AgcnParams":
        with np.load(path) as data:
            return cls({name: data[name].astype(np.float64) for name in data.files})


def prediction_input_dim(config: AgcnConfig) -> int:
    if config.single_scale is not None:
        return config.scale_dims[config.single_scale - 1]
    if config.use_agcns_concat:
        return sum(config.scale_dims)
    return config.hidden_dims[-1]


class ForwardOutputs:
    def __init__(self):
        self.h: List[TapeNode] = []
        self.x_hat: Optional[TapeNode] = None
        self.z: List[TapeNode] = []
        self.m: List[TapeNode] = []
        self.u: Optional[TapeNode] = None
        self.z_fused: Optional[TapeNode] = None
        self.z_pred: Optional[TapeNode] = None
        self.q: Optional[TapeNode] = None
        self.p: Optional[np.ndarray] = None
        self.loss_rec: Optional[TapeNode] = None
        self.loss_kl: Optional[TapeNode] = None
        self.loss_total: Optional[TapeNode] = None


def register_params(
    tape: Tape, params: AgcnParams, names: Optional[List[str]] = None
) -> Dict[str, TapeNode]:
    names = params.names() if names is None else names
    return {name: tape.parameter(name, params[name]) for name in names}


def _linear(x: TapeNode, w: TapeNode, b: TapeNode) -> TapeNode:
    tape = x.tape
    return tape.add_bias(tape.matmul(x, w), b)


def _activate(x: TapeNode, activation: str) -> TapeNode:
    if activation == "relu":
        return x.tape.relu(x)
    if activation == "tanh":
        return x.tape.tanh(x)
    return x


def ae_forward(
    x: TapeNode, nodes: Dict[str, TapeNode], config: AgcnConfig
) -> Tuple[List[TapeNode], TapeNode]:
    """Encoder chain H_1..H_l (H_l linear) and mirrored decoder to X_hat (linear)."""
    dims = config.layer_dims
    if x.cols != dims[0]:
        raise DimensionError(f"input has {x.cols} columns, model expects {dims[0]}")
    l = config.num_layers
    h_list = []
    current = x
    for i in range(1, l + 1):
        current = _linear(current, nodes[f"enc_w{i}"], nodes[f"enc_b{i}"])
        if i < l:
            current = _activate(current, config.ae_activation)
        h_list.append(current)
    for i in range(1, l + 1):
        current = _linear(current, nodes[f"dec_w{i}"], nodes[f"dec_b{i}"])
        if i < l:
            current = _activate(current, config.ae_activation)
    return h_list, current


def attention_h(
    z_i: TapeNode, h_i: TapeNode, w_a: TapeNode, slope: float
) -> TapeNode:
    """Per-sample weights of (Z_i, H_i): l2(softmax(leaky([Z_i || H_i] W_a)))."""
    if z_i.shape != h_i.shape:
        raise DimensionError(f"attention_h feature mismatch: {z_i.shape} vs {h_i.shape}")
    if w_a.shape != (2 * z_i.cols, 2):
        raise DimensionError(
            f"attention_h weight must be ({2 * z_i.cols}, 2), got {w_a.shape}"
        )
    tape = z_i.tape
    logits = tape.leaky_relu(tape.matmul(tape.concat_cols([z_i, h_i]), w_a), slope)
    return tape.l2_normalize_rows(tape.softmax_rows(logits))


def fuse_h(z_i: TapeNode, h_i: TapeNode, m_i: TapeNode) -> TapeNode:
    """Z'_i = (m_1 1) * Z_i + (m_2 1) * H_i."""
    if z_i.shape != h_i.shape or m_i.shape != (z_i.rows, 2):
        raise DimensionError(
            f"fuse_h shapes incompatible: z {z_i.shape}, h {h_i.shape}, m {m_i.shape}"
        )
    tape = z_i.tape
    m1 = tape.slice_cols(m_i, 0, 1)
    m2 = tape.slice_cols(m_i, 1, 2)
    return tape.add(tape.scale_rows(z_i, m1), tape.scale_rows(h_i, m2))


def gcn_layer(
    a_norm: SparseAdjacency, z_prime_i: TapeNode, w_i: TapeNode, slope: float
) -> TapeNode:
    tape = z_prime_i.tape
    return tape.leaky_relu(tape.matmul(spmm(a_norm, z_prime_i), w_i), slope)


def attention_s(z_list: List[TapeNode], w_s: TapeNode, slope: float) -> TapeNode:
    """Scale weights U = l2(softmax(leaky([Z_1 || ... || Z_l || H_l] W_s)))."""
    total = sum(z.cols for z in z_list)
    if w_s.rows != total or w_s.cols != len(z_list):
        raise DimensionError(
            f"attention_s weight must be ({total}, {len(z_list)}), got {w_s.shape}"
        )
    tape = w_s.tape
    logits = tape.leaky_relu(tape.matmul(tape.concat_cols(z_list), w_s), slope)
    return tape.l2_normalize_rows(tape.softmax_rows(logits))


def fuse_s(z_list: List[TapeNode], u: TapeNode) -> TapeNode:
    """Z' = [(u_1 1) * Z_1 || ... || (u_{l+1} 1) * Z_{l+1}]."""
    if u.cols != len(z_list):
        raise DimensionError(f"fuse_s needs {len(z_list)} weight columns, got {u.cols}")
    tape = u.tape
    blocks = [
        tape.scale_rows(z, tape.slice_cols(u, j, j + 1)) for j, z in enumerate(z_list)
    ]
    return tape.concat_cols(blocks)


def predict_layer(
    a_norm: SparseAdjacency, z_fused: TapeNode, w: TapeNode
) -> TapeNode:
    """Z = softmax(A_norm Z' W)."""
    tape = z_fused.tape
    return tape.softmax_rows(tape.matmul(spmm(a_norm, z_fused), w))


def soft_assignment(h_l: TapeNode, centroids: TapeNode, alpha: float) -> TapeNode:
    return h_l.tape.student_t(h_l, centroids, alpha)


def target_distribution(q: np.ndarray) -> np.ndarray:
    """P from Q: square, divide by cluster frequency, renormalize rows.

    The result is a plain array and is used as a constant target.
    """
    q = np.asarray(q, dtype=np.float64)
    frequency = q.sum(axis=0)
    if np.any(frequency <= 0):
        empty = np.flatnonzero(frequency <= 0).tolist()
        raise DegenerateInputError(f"soft assignment has empty cluster column(s) {empty}")
    weight = q * q / frequency
    return weight / weight.sum(axis=1, keepdims=True)


def kl_loss(
    p: np.ndarray, z_pred: TapeNode, q: TapeNode, lambda1: float, lambda2: float
) -> TapeNode:
    """lambda1 * KL(P || Z) + lambda2 * KL(P || Q)."""
    tape = z_pred.tape
    return tape.add(
        tape.scale(tape.kl_divergence(p, z_pred), lambda1),
        tape.scale(tape.kl_divergence(p, q), lambda2),
    )


def total_loss(rec: TapeNode, kl: TapeNode) -> TapeNode:
    return rec.tape.add(rec, kl)


def predict_labels(z_pred: np.ndarray) -> np.ndarray:
    return np.asarray(z_pred).argmax(axis=1)


def _fixed_weights(tape: Tape, n: int, config: AgcnConfig) -> TapeNode:
    return tape.constant(np.tile(np.asarray(config.fixed_fusion_weights), (n, 1)))


def forward(
    tape: Tape,
    params: AgcnParams,
    config: AgcnConfig,
    x: np.ndarray,
    a_norm: SparseAdjacency,
    target: Optional[np.ndarray] = None,
) -> ForwardOutputs:
    """Full forward pass with losses.

    ``target`` fixes P; when omitted P is derived from the current Q.

    :param tape: tape that records every operation for backward
    :param params: model parameters, centroids included
    :param config: architecture, fusion switches and loss weights
    :param x: feature matrix, one row per node
    :param a_norm: normalized propagation operator
    :param target: fixed target distribution P, or None
    :return: embeddings, Q, Z, P and the three loss nodes
    """
    if x.shape[0] != a_norm.n:
        raise DataValidationError(
            f"feature rows ({x.shape[0]}) do not match graph nodes ({a_norm.n})"
        )
    if not params.has_centroids:
        raise DataValidationError("cluster centroids are not initialized")
    nodes = register_params(tape, params)
    slope = config.leaky_slope
    l = config.num_layers
    n = x.shape[0]
    out = ForwardOutputs()

    x_node = tape.constant(x)
    out.h, out.x_hat = ae_forward(x_node, nodes, config)

    z = gcn_layer(a_norm, x_node, nodes["gcn_w0"], slope)
    out.z.append(z)
    for i in range(1, l):
        if config.use_agcnh:
            m = attention_h(z, out.h[i - 1], nodes[f"attn_h_w{i}"], slope)
        else:
            m = _fixed_weights(tape, n, config)
        out.m.append(m)
        z = gcn_layer(a_norm, fuse_h(z, out.h[i - 1], m), nodes[f"gcn_w{i}"], slope)
        out.z.append(z)

    scales = out.z + [out.h[-1]]
    if config.single_scale is not None:
        out.z_fused = scales[config.single_scale - 1]
    elif config.use_agcns_concat:
        if config.use_agcns_attention:
            out.u = attention_s(scales, nodes["attn_s_w"], slope)
        else:
            out.u = tape.constant(np.ones((n, len(scales))))
        out.z_fused = fuse_s(scales, out.u)
    else:
        if config.use_agcnh:
            m = attention_h(out.z[-1], out.h[-1], nodes[f"attn_h_w{l}"], slope)
        else:
            m = _fixed_weights(tape, n, config)
        out.m.append(m)
        out.z_fused = fuse_h(out.z[-1], out.h[-1], m)

    out.z_pred = predict_layer(a_norm, out.z_fused, nodes["pred_w"])
    out.q = soft_assignment(out.h[-1], nodes["centroids"], config.alpha)
    out.p = target_distribution(out.q.value) if target is None else np.asarray(target)

    out.loss_rec = tape.frobenius_sq_loss(out.x_hat, x_node)
    out.loss_kl = kl_loss(out.p, out.z_pred, out.q, config.lambda1, config.lambda2)
    out.loss_total = total_loss(out.loss_rec, out.loss_kl)
    return out


def check_distributions(out: ForwardOutputs, config: AgcnConfig, tol: float = 1e-9):
    """Raise NumericalError when a normalization invariant is violated."""

    def unit_rows(node: TapeNode, label: str) -> None:
        norms = np.sqrt((node.value**2).sum(axis=1))
        if np.max(np.abs(norms - 1.0)) > tol:
            raise NumericalError(f"{label} rows are not unit-l2")

    def stochastic_rows(values: np.ndarray, label: str) -> None:
        if np.max(np.abs(values.sum(axis=1) - 1.0)) > tol:
            raise NumericalError(f"{label} rows do not sum to 1")

    if config.use_agcnh:
        for i, m in enumerate(out.m, start=1):
            unit_rows(m, f"M_{i}")
    if out.u is not None and config.use_agcns_attention:
        unit_rows(out.u, "U")
    stochastic_rows(out.z_pred.value, "Z")
    stochastic_rows(out.q.value, "Q")
    stochastic_rows(out.p, "P")
    for label, node in (("loss", out.loss_total), ("Z", out.z_pred), ("Q", out.q)):
        if not np.all(np.isfinite(node.value)):
            raise NumericalError(f"{label} contains non-finite values")
