"""Command-line entry point: ``pyagcn <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data validation error, 3 numerical
failure.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib.pyplot as plt
import pandas as pd
from pydantic import ValidationError

from pyagcn import __version__
from pyagcn.agcn import AgcnParams
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
from pyagcn.errors import AgcnError, ArgumentError, NumericalError
from pyagcn.graph import SparseAdjacency, write_edge_list
from pyagcn.knn import build_knn_graph
from pyagcn.metrics import evaluate
from pyagcn.models import (
    ABLATIONS,
    DATASET_PRESETS,
    AgcnConfig,
    ClusteringReport,
    KnnConfig,
    RunConfig,
    RunManifest,
    TrainConfig,
    apply_ablation,
)
from pyagcn.trainer import (
    TrainResult,
    pretrain_ae,
    plot_trace,
    summarize,
    train_many,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3

THREADS_ENV = "AGCN_THREADS"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ArgumentError(message)


def threads_from_env() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ArgumentError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if threads < 1:
        raise ArgumentError(f"{THREADS_ENV} must be at least 1, got {threads}")
    return threads


# argument groups ----------------------------------------------------------
def _add_dataset_args(p: argparse.ArgumentParser, graph: bool = True) -> None:
    p.add_argument("--features", required=True, help="feature matrix file")
    if graph:
        p.add_argument("--graph", help="edge list; a k'-NN graph is built when absent")
        p.add_argument("--knn", type=int, default=None, help="k' for the built graph")
        p.add_argument("--metric", choices=["euclidean", "cosine"], default="euclidean")
    p.add_argument("--labels", help="ground-truth label file")
    p.add_argument("--standardize", action="store_true", help="z-score features")


def _add_model_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with {'model': ..., 'train': ...}")
    p.add_argument("--preset", choices=sorted(DATASET_PRESETS))
    p.add_argument("--k", type=int, help="number of clusters")
    p.add_argument("--hidden-dims", type=int, nargs="+")
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--leaky-slope", type=float)
    p.add_argument("--ae-activation", choices=["relu", "tanh", "linear"])
    p.add_argument("--no-agcnh", dest="use_agcnh", action="store_const", const=False)
    p.add_argument(
        "--no-scale-concat", dest="use_agcns_concat", action="store_const", const=False
    )
    p.add_argument(
        "--no-scale-attention",
        dest="use_agcns_attention",
        action="store_const",
        const=False,
    )
    p.add_argument("--single-scale", type=int)


def _add_train_args(p: argparse.ArgumentParser, runs: bool = True) -> None:
    p.add_argument("--pretrain-epochs", type=int)
    p.add_argument("--pretrain-lr", type=float)
    p.add_argument("--pretrain-batch", type=int)
    p.add_argument("--joint-lr", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--seed", type=int)
    if not runs:
        return
    p.add_argument("--seeds", type=int, nargs="+", help="one run per seed")
    p.add_argument("--eval-every", type=int)
    p.add_argument("--kmeans-max-iters", type=int)
    p.add_argument(
        "--check-invariants", dest="check_invariants", action="store_const", const=True
    )
    p.add_argument("--report-iteration", choices=["final", "best"])
    p.add_argument("--pretrained", help="AE weights written by the pretrain command")


MODEL_FLAGS = [
    "k",
    "hidden_dims",
    "alpha",
    "lambda1",
    "lambda2",
    "leaky_slope",
    "ae_activation",
    "use_agcnh",
    "use_agcns_concat",
    "use_agcns_attention",
    "single_scale",
]
TRAIN_FLAGS = [
    "pretrain_epochs",
    "pretrain_lr",
    "pretrain_batch",
    "joint_lr",
    "max_iters",
    "seed",
    "eval_every",
    "kmeans_max_iters",
    "check_invariants",
    "report_iteration",
]


# assembly -----------------------------------------------------------------
def load_configs(
    args: argparse.Namespace, dataset: Dataset
) -> Tuple[AgcnConfig, TrainConfig]:
    """File values, then preset, then explicit flags; k falls back to the labels."""
    if args.config:
        run = RunConfig.model_validate_json(Path(args.config).read_text())
    else:
        run = RunConfig()
    model = dict(run.model)
    train = run.train.model_dump()
    if args.preset:
        preset = DATASET_PRESETS[args.preset]
        model.update(lambda1=preset.lambda1, lambda2=preset.lambda2)
        train["joint_lr"] = preset.joint_lr
    for name in MODEL_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            model[name] = value
    if model.get("use_agcns_concat") is False and args.use_agcns_attention is None:
        model["use_agcns_attention"] = False
    for name in TRAIN_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            train[name] = value
    if model.get("k") is None:
        if dataset.num_classes is None:
            raise ArgumentError("number of clusters unknown: pass --k or --labels")
        model["k"] = dataset.num_classes
    model.setdefault("input_dim", dataset.d)
    return AgcnConfig.model_validate(model), TrainConfig.model_validate(train)


def load_inputs(args: argparse.Namespace) -> Dataset:
    dataset = load_dataset(args.features, getattr(args, "graph", None), args.labels)
    if args.standardize:
        dataset.features = standardize(dataset.features)
    return dataset


def ensure_graph(args: argparse.Namespace, dataset: Dataset) -> SparseAdjacency:
    if dataset.adjacency is not None:
        if args.knn is not None:
            raise ArgumentError("--graph and --knn are mutually exclusive")
        return dataset.adjacency
    knn = KnnConfig(metric=args.metric)
    if args.knn is not None:
        knn = KnnConfig(k_prime=args.knn, metric=args.metric)
    dataset.adjacency = build_knn_graph(dataset.features, knn)
    return dataset.adjacency


def _seeds(args: argparse.Namespace, train_config: TrainConfig) -> List[int]:
    return list(args.seeds) if args.seeds else [train_config.seed]


def _pretrained(args: argparse.Namespace) -> Optional[AgcnParams]:
    return AgcnParams.load(args.pretrained) if args.pretrained else None


def _manifest(model_config, train_config, dataset, seeds) -> RunManifest:
    return RunManifest(
        agcn_config=model_config,
        train_config=train_config,
        dataset_fingerprint=fingerprint(dataset),
        seeds=seeds,
        version=__version__,
    )


def _write_run(result: TrainResult, directory: Path, plot: bool) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    result.trace.to_csv(directory / "trace.csv")
    write_labels(result.labels, directory / "pred.labels")
    write_matrix(result.h, directory / "embedding_h.matrix")
    write_matrix(result.z, directory / "embedding_z.matrix")
    result.params.save(directory / "params.npz")
    if result.metrics is not None:
        metrics = result.metrics.model_dump_json(indent=2)
        (directory / "metrics.json").write_text(metrics)
    if plot:
        plt.switch_backend("Agg")
        fig = plot_trace(result.trace, instance_show=False)
        fig.savefig(directory / "trace.png")
        plt.close(fig)


def _write_json(path: Path, payload: Dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n")


def _comparison(
    reports: Dict[str, ClusteringReport], seeds: List[int], args, dataset: Dataset
) -> int:
    table = pd.DataFrame({name: r.row() for name, r in reports.items()}).T
    print(table.to_string())
    payload = {
        "dataset": dataset.name,
        "seeds": seeds,
        "rows": {name: r.row() for name, r in reports.items()},
        "reports": {name: r.model_dump() for name, r in reports.items()},
    }
    if args.out:
        _write_json(Path(args.out), payload)
        logger.info("wrote %s", args.out)
    return EXIT_OK


def _require_labels(dataset: Dataset, command: str) -> None:
    if dataset.labels is None:
        raise ArgumentError(f"{command} needs ground-truth labels (--labels)")


# commands -----------------------------------------------------------------
def cmd_train(args: argparse.Namespace) -> int:
    dataset = load_inputs(args)
    graph = ensure_graph(args, dataset)
    model_config, train_config = load_configs(args, dataset)
    seeds = _seeds(args, train_config)
    results = train_many(
        dataset.features,
        graph,
        model_config,
        train_config,
        seeds,
        labels=dataset.labels,
        workers=threads_from_env(),
        pretrained=_pretrained(args),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for result in results:
        _write_run(result, out / f"seed-{result.seed}", args.plot)
    manifest = _manifest(model_config, train_config, dataset, seeds)
    (out / "manifest.json").write_text(manifest.model_dump_json(indent=2))
    if dataset.labels is not None:
        report = summarize(results, train_config.report_iteration)
        (out / "report.json").write_text(report.model_dump_json(indent=2))
        print(json.dumps(report.row(), ensure_ascii=False))
    logger.info("wrote run artifacts to %s", out)
    return EXIT_OK


def cmd_pretrain(args: argparse.Namespace) -> int:
    dataset = load_inputs(args)
    model_config, train_config = load_configs(args, dataset)
    history: List[float] = []
    params = pretrain_ae(dataset.features, model_config, train_config, history=history)
    ae_only = AgcnParams({name: params[name] for name in params.ae_names()})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ae_only.save(out)
    print(f"reconstruction loss {history[0]:.6g} -> {history[-1]:.6g}")
    return EXIT_OK


def cmd_build_knn(args: argparse.Namespace) -> int:
    features = read_matrix(args.features)
    if args.standardize:
        features = standardize(features)
    knn = KnnConfig(k_prime=args.k_prime, metric=args.metric)
    graph = build_knn_graph(features, knn)
    write_edge_list(graph, args.out)
    print(f"{graph.n} nodes, {graph.nnz // 2} edges -> {args.out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    metrics = evaluate(read_labels(args.true), read_labels(args.pred))
    print(metrics.model_dump_json())
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    dataset = generate_synthetic(
        args.blocks,
        args.per_block,
        args.p_in,
        args.p_out,
        args.feat_dim,
        args.sep,
        args.seed,
    )
    if args.name:
        dataset.name = args.name
    paths = save_dataset(dataset, args.out)
    for kind, path in paths.items():
        print(f"{kind}: {path}")
    return EXIT_OK


def _report(
    args: argparse.Namespace,
    dataset: Dataset,
    graph: SparseAdjacency,
    model_config: AgcnConfig,
    train_config: TrainConfig,
    seeds: List[int],
) -> ClusteringReport:
    results = train_many(
        dataset.features,
        graph,
        model_config,
        train_config,
        seeds,
        labels=dataset.labels,
        workers=threads_from_env(),
        pretrained=_pretrained(args),
    )
    return summarize(results, train_config.report_iteration)


def cmd_ablate(args: argparse.Namespace) -> int:
    dataset = load_inputs(args)
    _require_labels(dataset, "ablate")
    graph = ensure_graph(args, dataset)
    model_config, train_config = load_configs(args, dataset)
    seeds = _seeds(args, train_config)
    reports = {}
    for name in ABLATIONS:
        logger.info("ablation %s", name)
        config = apply_ablation(model_config, name)
        reports[name] = _report(args, dataset, graph, config, train_config, seeds)
    return _comparison(reports, seeds, args, dataset)


def cmd_scales(args: argparse.Namespace) -> int:
    dataset = load_inputs(args)
    _require_labels(dataset, "scales")
    graph = ensure_graph(args, dataset)
    model_config, train_config = load_configs(args, dataset)
    seeds = _seeds(args, train_config)
    l = model_config.num_layers
    # z1..zl are the GCN layers, h the auto-encoder bottleneck
    variants = {f"z{j}": j for j in range(1, l + 1)}
    variants["h"] = l + 1
    variants["fused"] = None
    reports = {}
    for name, scale in variants.items():
        config = AgcnConfig.model_validate(
            {**model_config.model_dump(), "single_scale": scale}
        )
        reports[name] = _report(args, dataset, graph, config, train_config, seeds)
    return _comparison(reports, seeds, args, dataset)


def cmd_sweep_knn(args: argparse.Namespace) -> int:
    dataset = load_inputs(args)
    _require_labels(dataset, "sweep-knn")
    model_config, train_config = load_configs(args, dataset)
    seeds = _seeds(args, train_config)
    reports = {}
    for k_prime in args.k_primes:
        knn = KnnConfig(k_prime=k_prime, metric=args.metric)
        graph = build_knn_graph(dataset.features, knn)
        reports[f"k'={k_prime}"] = _report(
            args, dataset, graph, model_config, train_config, seeds
        )
    return _comparison(reports, seeds, args, dataset)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pyagcn", description="Attention-driven graph clustering")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="-v info, -vv debug"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pretrain, cluster and jointly train")
    _add_dataset_args(p)
    _add_model_args(p)
    _add_train_args(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--plot", action="store_true", help="save trace.png per run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pretrain", help="pretrain the auto-encoder only")
    _add_dataset_args(p, graph=False)
    _add_model_args(p)
    _add_train_args(p, runs=False)
    p.add_argument("--out", required=True, help="weights file (.npz)")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("build-knn", help="k'-nearest-neighbor graph from features")
    p.add_argument("--features", required=True)
    p.add_argument("--k-prime", type=int, default=3)
    p.add_argument("--metric", choices=["euclidean", "cosine"], default="euclidean")
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--out", required=True, help="edge list file")
    p.set_defaults(func=cmd_build_knn)

    p = sub.add_parser("eval", help="compare two label files")
    p.add_argument("--true", required=True)
    p.add_argument("--pred", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a stochastic block model dataset")
    p.add_argument("--blocks", type=int, default=2)
    p.add_argument("--per-block", type=int, default=30)
    p.add_argument("--p-in", type=float, default=0.5)
    p.add_argument("--p-out", type=float, default=0.02)
    p.add_argument("--feat-dim", type=int, default=2)
    p.add_argument("--sep", type=float, default=10.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    for name, func, help_text in (
        ("ablate", cmd_ablate, "compare the four fusion configurations"),
        ("scales", cmd_scales, "compare single-scale prediction inputs"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_dataset_args(p)
        _add_model_args(p)
        _add_train_args(p)
        p.add_argument("--out", help="JSON output file")
        p.set_defaults(func=func)

    p = sub.add_parser("sweep-knn", help="compare k' values for the k'-NN graph")
    _add_dataset_args(p, graph=False)
    p.add_argument("--metric", choices=["euclidean", "cosine"], default="euclidean")
    p.add_argument("--k-primes", type=int, nargs="+", default=[1, 3, 5])
    _add_model_args(p)
    _add_train_args(p)
    p.add_argument("--out", help="JSON output file")
    p.set_defaults(func=cmd_sweep_knn)
    return parser


def _configure_logging(verbosity: int) -> None:
    level = logging.WARNING
    if verbosity == 1:
        level = logging.INFO
    elif verbosity >= 2:
        level = logging.DEBUG
    logging.basicConfig(
        level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s"
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ArgumentError as exc:
        print(f"pyagcn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_USAGE
    _configure_logging(args.verbose)
    try:
        return args.func(args)
    except (ArgumentError, ValidationError) as exc:
        print(f"pyagcn: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        where = "" if exc.iteration is None else f" (iteration {exc.iteration})"
        print(f"pyagcn: numerical failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (AgcnError, OSError) as exc:
        print(f"pyagcn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
