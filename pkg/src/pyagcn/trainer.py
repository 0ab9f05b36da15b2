"""Two-phase optimization: AE pretraining, then full-batch joint training."""

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from pyagcn.agcn import (
    AgcnParams,
    ForwardOutputs,
    ae_forward,
    check_distributions,
    forward,
    predict_labels,
    register_params,
)
from pyagcn.autodiff import Tape
from pyagcn.errors import (
    ArgumentError,
    DataValidationError,
    DegenerateInputError,
    DimensionError,
    NumericalError,
)
from pyagcn.graph import SparseAdjacency, normalize_adjacency
from pyagcn.kmeans import KmeansResult, kmeans
from pyagcn.metrics import aggregate, evaluate
from pyagcn.models import (
    AgcnConfig,
    ClusteringReport,
    RunMetrics,
    TraceRecord,
    TrainConfig,
)

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

TRACE_COLUMNS = ["iter", "loss_total", "loss_rec", "loss_kl", "acc", "nmi", "ari", "f1"]


class AdamState:
    def __init__(self):
        self.step = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}


def adam_step(
    params: AgcnParams,
    grads: Dict[str, np.ndarray],
    state: AdamState,
    lr: float,
) -> None:
    """One bias-corrected Adam update of every parameter named in ``grads``."""
    for name, g in grads.items():
        if name not in params.tensors:
            raise ArgumentError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise DimensionError(
                f"gradient of {name} has shape {g.shape}, "
                f"parameter has {params[name].shape}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}", parameter=name)
    state.step += 1
    t = state.step
    for name, g in grads.items():
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = ADAM_BETA1 * m + (1 - ADAM_BETA1) * g
        v = ADAM_BETA2 * v + (1 - ADAM_BETA2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - ADAM_BETA1**t)
        v_hat = v / (1 - ADAM_BETA2**t)
        params.tensors[name] -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def reconstruction_loss(params: AgcnParams, config: AgcnConfig, x: np.ndarray) -> float:
    tape = Tape()
    nodes = register_params(tape, params, params.ae_names())
    x_node = tape.constant(x)
    _, x_hat = ae_forward(x_node, nodes, config)
    return float(tape.frobenius_sq_loss(x_hat, x_node).value[0, 0])


def pretrain_ae(
    x: np.ndarray,
    model_config: AgcnConfig,
    train_config: TrainConfig,
    params: Optional[AgcnParams] = None,
    history: Optional[List[float]] = None,
) -> AgcnParams:
    """Minimize the reconstruction loss over shuffled mini-batches.

    Only the encoder/decoder tensors move. When ``history`` is given it receives
    the full-data loss before training and after every epoch.
    """
    x = np.asarray(x, dtype=np.float64)
    config = _bind_input_dim(model_config, x)
    if params is None:
        params = AgcnParams.initialize(config, train_config.seed)
    rng = np.random.default_rng([train_config.seed, 1])
    state = AdamState()
    names = params.ae_names()
    n = x.shape[0]
    batch = train_config.pretrain_batch
    if history is not None:
        history.append(reconstruction_loss(params, config, x))

    for epoch in range(1, train_config.pretrain_epochs + 1):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            rows = order[start : start + batch]
            tape = Tape()
            nodes = register_params(tape, params, names)
            x_node = tape.constant(x[rows])
            _, x_hat = ae_forward(x_node, nodes, config)
            loss = tape.frobenius_sq_loss(x_hat, x_node)
            if not np.isfinite(loss.value[0, 0]):
                raise NumericalError(
                    f"reconstruction loss diverged in pretraining epoch {epoch}",
                    iteration=epoch,
                )
            adam_step(params, tape.backward(loss), state, train_config.pretrain_lr)
        epoch_loss = reconstruction_loss(params, config, x)
        if not np.isfinite(epoch_loss):
            raise NumericalError(
                f"reconstruction loss diverged after pretraining epoch {epoch}",
                iteration=epoch,
            )
        if history is not None:
            history.append(epoch_loss)
        logger.info(
            "pretrain epoch %d/%d: loss_rec=%.6g",
            epoch,
            train_config.pretrain_epochs,
            epoch_loss,
        )
    return params


def _bind_input_dim(config: AgcnConfig, x: np.ndarray) -> AgcnConfig:
    if x.ndim != 2:
        raise DataValidationError(f"features must be 2-D, got shape {x.shape}")
    if config.input_dim is None:
        return config.with_input_dim(x.shape[1])
    if config.input_dim != x.shape[1]:
        raise DimensionError(
            f"model expects {config.input_dim} input features, data has {x.shape[1]}"
        )
    return config


class TrainTrace:
    """One record per completed joint iteration."""

    def __init__(self):
        self.records: List[TraceRecord] = []

    def append(self, record: TraceRecord) -> None:
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i: int) -> TraceRecord:
        return self.records[i]

    def best(self) -> Optional[TraceRecord]:
        """Evaluated record with the highest accuracy, earliest on ties."""
        evaluated = [r for r in self.records if r.acc is not None]
        if not evaluated:
            return None
        return max(evaluated, key=lambda r: (r.acc, -r.iter))

    def to_frame(self) -> pd.DataFrame:
        if not self.records:
            return pd.DataFrame(columns=TRACE_COLUMNS)
        return pd.DataFrame([r.model_dump() for r in self.records], columns=TRACE_COLUMNS)

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False)

    @classmethod
    def read_csv(cls, path: Union[str, Path]) -> "TrainTrace":
        frame = pd.read_csv(path)
        trace = cls()
        for row in frame.to_dict(orient="records"):
            clean = {k: (None if pd.isna(v) else v) for k, v in row.items()}
            clean["iter"] = int(clean["iter"])
            trace.append(TraceRecord(**clean))
        return trace


class TrainResult:
    def __init__(
        self,
        params: AgcnParams,
        trace: TrainTrace,
        labels: np.ndarray,
        h: np.ndarray,
        z: np.ndarray,
        seed: int,
    ):
        self.params = params
        self.trace = trace
        self.labels = labels
        self.h = h
        self.z = z
        self.seed = seed
        self.metrics: Optional[RunMetrics] = None
        self.best: Optional[TraceRecord] = None
        self.kmeans: Optional[KmeansResult] = None
        self.pretrain_history: List[float] = []

    def best_metrics(self) -> Optional[RunMetrics]:
        if self.best is None:
            return None
        return RunMetrics(
            acc=self.best.acc, nmi=self.best.nmi, ari=self.best.ari, f1=self.best.f1
        )

    def __repr__(self) -> str:
        return f"TrainResult(seed={self.seed}, iters={len(self.trace)}, {self.metrics})"


class AgcnTrainer:
    def __init__(self, model_config: AgcnConfig, train_config: TrainConfig):
        self.model_config = model_config
        self.train_config = train_config

    def pretrain(
        self, x: np.ndarray, pretrained: Optional[AgcnParams] = None
    ) -> Tuple[AgcnParams, List[float]]:
        config = _bind_input_dim(self.model_config, x)
        params = AgcnParams.initialize(config, self.train_config.seed)
        history: List[float] = []
        if pretrained is None:
            pretrain_ae(x, config, self.train_config, params, history)
            return params, history
        for name in params.ae_names():
            if name not in pretrained.tensors:
                raise DataValidationError(f"pretrained weights lack {name}")
            if pretrained[name].shape != params[name].shape:
                raise DimensionError(
                    f"pretrained {name} has shape {pretrained[name].shape}, "
                    f"model needs {params[name].shape}"
                )
            params.tensors[name] = pretrained[name].copy()
        logger.info("using pretrained auto-encoder weights")
        return params, history

    def init_centroids(self, params: AgcnParams, x: np.ndarray) -> KmeansResult:
        """Run k-means once on the bottleneck embedding and store the centroids."""
        config = _bind_input_dim(self.model_config, x)
        h = self.embed(params, x)
        result = kmeans(
            h,
            config.k,
            seed=self.train_config.seed,
            max_iters=self.train_config.kmeans_max_iters,
        )
        params.set_centroids(result.centroids)
        logger.info("initialized centroids: %r", result)
        return result

    def embed(self, params: AgcnParams, x: np.ndarray) -> np.ndarray:
        config = _bind_input_dim(self.model_config, x)
        tape = Tape()
        nodes = register_params(tape, params, params.ae_names())
        h_list, _ = ae_forward(tape.constant(x), nodes, config)
        return h_list[-1].value.copy()

    def _forward(
        self, params: AgcnParams, x: np.ndarray, a_norm: SparseAdjacency, it: int
    ) -> Tuple[Tape, ForwardOutputs]:
        config = _bind_input_dim(self.model_config, x)
        tape = Tape()
        try:
            out = forward(tape, params, config, x, a_norm)
        except DegenerateInputError as exc:
            raise NumericalError(
                f"target distribution degenerate at iteration {it}: {exc}", iteration=it
            ) from exc
        loss = float(out.loss_total.value[0, 0])
        if not np.isfinite(loss):
            raise NumericalError(f"loss is {loss} at iteration {it}", iteration=it)
        if self.train_config.check_invariants:
            try:
                check_distributions(out, config)
            except NumericalError as exc:
                exc.iteration = it
                raise
        return tape, out

    def run(
        self,
        x: np.ndarray,
        a: SparseAdjacency,
        labels: Optional[np.ndarray] = None,
        pretrained: Optional[AgcnParams] = None,
    ) -> TrainResult:
        """Pretrain the autoencoder, seed centroids with k-means, then train jointly.

        :param x: feature matrix, one row per node
        :param a: raw adjacency; normalization happens here
        :param labels: ground truth; when given the trace carries metrics
        :param pretrained: autoencoder weights that replace pretraining
        :return: final parameters, trace, predicted labels and embeddings
        """
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != a.n:
            raise DataValidationError(
                f"feature rows ({x.shape[0]}) do not match graph nodes ({a.n})"
            )
        if labels is not None:
            labels = np.asarray(labels).ravel()
            if labels.size != x.shape[0]:
                raise DataValidationError(
                    f"{labels.size} labels for {x.shape[0]} samples"
                )
        cfg = self.train_config
        a_norm = normalize_adjacency(a)

        params, history = self.pretrain(x, pretrained)
        clustering = self.init_centroids(params, x)

        logger.info("start joint training: %d iterations", cfg.max_iters)
        trace = TrainTrace()
        state = AdamState()
        for it in range(1, cfg.max_iters + 1):
            tape, out = self._forward(params, x, a_norm, it)
            record = TraceRecord(
                iter=it,
                loss_total=float(out.loss_total.value[0, 0]),
                loss_rec=float(out.loss_rec.value[0, 0]),
                loss_kl=float(out.loss_kl.value[0, 0]),
            )
            if labels is not None and (it % cfg.eval_every == 0 or it == cfg.max_iters):
                scores = evaluate(labels, predict_labels(out.z_pred.value))
                record = record.model_copy(update=scores.model_dump())
            trace.append(record)
            grads = tape.backward(out.loss_total)
            try:
                adam_step(params, grads, state, cfg.joint_lr)
            except NumericalError as exc:
                exc.iteration = it
                raise
            logger.debug("iter %d: %s", it, record)
        logger.info("ended joint training")

        _, out = self._forward(params, x, a_norm, cfg.max_iters + 1)
        result = TrainResult(
            params=params,
            trace=trace,
            labels=predict_labels(out.z_pred.value),
            h=out.h[-1].value.copy(),
            z=out.z_pred.value.copy(),
            seed=cfg.seed,
        )
        result.kmeans = clustering
        result.pretrain_history = history
        if labels is not None:
            result.metrics = evaluate(labels, result.labels)
            result.best = trace.best()
        return result


def train(
    x: np.ndarray,
    a: SparseAdjacency,
    train_config: TrainConfig,
    model_config: AgcnConfig,
    labels: Optional[np.ndarray] = None,
    pretrained: Optional[AgcnParams] = None,
) -> TrainResult:
    """One training run.

    :param x: feature matrix
    :param a: raw adjacency
    :param train_config: optimizer settings, including the seed
    :param model_config: architecture and loss weights
    :param labels: optional ground truth for per-iteration metrics
    :param pretrained: optional autoencoder weights
    :return: the finished run
    """
    return AgcnTrainer(model_config, train_config).run(x, a, labels, pretrained)


def train_many(
    x: np.ndarray,
    a: SparseAdjacency,
    model_config: AgcnConfig,
    train_config: TrainConfig,
    seeds: Iterable[int],
    labels: Optional[np.ndarray] = None,
    workers: int = 1,
    pretrained: Optional[AgcnParams] = None,
) -> List[TrainResult]:
    """Independent runs, one per seed, returned in seed order.

    Each run copies ``train_config`` with its own seed. Runs are spread over
    ``workers`` threads; results do not depend on the worker count.

    :param seeds: one run per entry, duplicates allowed
    :param workers: thread count, at least 1
    :return: results in the order of ``seeds``
    """
    seeds = list(seeds)
    if not seeds:
        raise ArgumentError("need at least one seed")
    if workers < 1:
        raise ArgumentError(f"workers must be at least 1, got {workers}")

    def one(seed: int) -> TrainResult:
        cfg = train_config.model_copy(update={"seed": int(seed)})
        return train(x, a, cfg, model_config, labels, pretrained)

    if workers == 1:
        return [one(seed) for seed in seeds]
    with ThreadPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
        return list(pool.map(one, seeds))


def summarize(
    results: List[TrainResult], report_iteration: str = "final"
) -> ClusteringReport:
    """mean±std report over runs; the other iteration choice goes to metadata."""
    if not results:
        raise ArgumentError("cannot summarize an empty list of runs")
    if any(r.metrics is None for r in results):
        raise ArgumentError("runs were trained without ground-truth labels")
    final = [r.metrics for r in results]
    best = [r.best_metrics() for r in results]
    if report_iteration == "final":
        headline, other, other_name = final, best, "best"
    elif report_iteration == "best":
        headline, other, other_name = best, final, "final"
    else:
        raise ArgumentError(
            f"report_iteration must be final or best, got {report_iteration!r}"
        )
    alternate = aggregate(other)
    metadata = {
        "report_iteration": report_iteration,
        "seeds": [r.seed for r in results],
        "iterations": len(results[0].trace),
        "best_iterations": [r.best.iter for r in results],
        other_name: {
            name: getattr(alternate, name).model_dump()
            for name in ("acc", "nmi", "ari", "f1")
        },
    }
    return aggregate(headline, metadata)


def plot_trace(
    trace: TrainTrace,
    figsize: Tuple[int, int] = (14, 7),
    instance_show: bool = True,
):
    """
    Loss curves on the left, clustering metrics (when evaluated) on the right.

    :param trace: trace of a finished run
    :param figsize: size of the figure
    :param instance_show: if False do not show the plot when the function ends
    :return: the matplotlib figure
    """
    frame = trace.to_frame()
    fig = plt.figure(figsize=figsize)
    plt.subplot(1, 2, 1)
    for column in ("loss_total", "loss_rec", "loss_kl"):
        plt.plot(frame["iter"], frame[column], label=column)
    plt.title("Training Loss")
    plt.xlabel("Iteration")
    plt.ylabel("Loss")
    plt.yscale("symlog")
    plt.legend()
    plt.grid()

    plt.subplot(1, 2, 2)
    evaluated = frame.dropna(subset=["acc"])
    for column in ("acc", "nmi", "ari", "f1"):
        if not evaluated.empty:
            plt.plot(evaluated["iter"], evaluated[column], label=column.upper())
    plt.title("Clustering Metrics")
    plt.xlabel("Iteration")
    plt.ylabel("Score")
    if not evaluated.empty:
        plt.legend()
    plt.grid()
    if instance_show:
        plt.show()
    return fig
