from typing import Dict, List, Literal, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from pyagcn.errors import ArgumentError

DEFAULT_HIDDEN_DIMS = [500, 500, 2000, 10]


class KnnConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    k_prime: int = Field(default=3, ge=1)
    metric: Literal["euclidean", "cosine"] = "euclidean"


class AgcnConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    input_dim: Optional[int] = Field(default=None, ge=1)
    hidden_dims: List[int] = Field(default_factory=lambda: list(DEFAULT_HIDDEN_DIMS))
    k: int = Field(ge=1)
    alpha: float = Field(default=1.0, gt=0)
    lambda1: float = Field(default=0.1, ge=0)
    lambda2: float = Field(default=0.01, ge=0)
    use_agcnh: bool = True
    use_agcns_concat: bool = True
    use_agcns_attention: bool = True
    leaky_slope: float = Field(default=0.2, gt=0, lt=1)
    ae_activation: Literal["relu", "tanh", "linear"] = "relu"
    fixed_fusion_weights: Tuple[float, float] = (1.0, 0.0)  # stands in for M_i
    single_scale: Optional[int] = None  # 1..l+1, l+1 is the AE bottleneck

    @model_validator(mode="after")
    def check_structure(self) -> "AgcnConfig":
        if len(self.hidden_dims) < 2:
            raise ValueError("need at least two encoder layers (l >= 2)")
        if any(d < 1 for d in self.hidden_dims):
            raise ValueError(f"layer dims must be positive, got {self.hidden_dims}")
        if self.use_agcns_attention and not self.use_agcns_concat:
            raise ValueError("scale attention requires the multi-scale concatenation")
        if self.single_scale is not None and not (
            1 <= self.single_scale <= self.num_layers + 1
        ):
            raise ValueError(
                f"single_scale must lie in [1, {self.num_layers + 1}], "
                f"got {self.single_scale}"
            )
        return self

    @property
    def num_layers(self) -> int:
        return len(self.hidden_dims)

    @property
    def layer_dims(self) -> List[int]:
        """[d, d_1, ..., d_l]."""
        if self.input_dim is None:
            raise ArgumentError("input_dim is not set; call with_input_dim first")
        return [self.input_dim] + list(self.hidden_dims)

    @property
    def scale_dims(self) -> List[int]:
        """Column widths of Z_1, ..., Z_l, H_l."""
        return list(self.hidden_dims) + [self.hidden_dims[-1]]

    def with_input_dim(self, d: int) -> "AgcnConfig":
        return self.model_copy(update={"input_dim": int(d)})


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    pretrain_epochs: int = Field(default=30, ge=1)
    pretrain_lr: float = Field(default=1e-3, gt=0)
    pretrain_batch: int = Field(default=256, ge=1)
    joint_lr: float = Field(default=1e-3, gt=0)
    max_iters: int = Field(default=200, ge=1)
    seed: int = 0
    eval_every: int = Field(default=1, ge=1)
    kmeans_max_iters: int = Field(default=300, ge=1)
    check_invariants: bool = False
    report_iteration: Literal["final", "best"] = "final"


class RunConfig(BaseModel):
    """Layout of JSON config files: {"model": {...}, "train": {...}}."""

    model_config = ConfigDict(extra="forbid")

    model: Dict = Field(default_factory=dict)  # partial AgcnConfig fields
    train: TrainConfig = Field(default_factory=TrainConfig)


class DatasetPreset(BaseModel):
    lambda1: float
    lambda2: float
    joint_lr: float


DATASET_PRESETS: Dict[str, DatasetPreset] = {
    "usps": DatasetPreset(lambda1=1000.0, lambda2=1000.0, joint_lr=1e-3),
    "hhar": DatasetPreset(lambda1=1.0, lambda2=0.1, joint_lr=1e-3),
    "reuters": DatasetPreset(lambda1=10.0, lambda2=10.0, joint_lr=1e-4),
    "graph": DatasetPreset(lambda1=0.1, lambda2=0.01, joint_lr=1e-3),
    "citeseer": DatasetPreset(lambda1=0.1, lambda2=0.01, joint_lr=1e-4),
}

# Rows of the fusion ablation, weakest first.
ABLATIONS: Dict[str, Dict[str, bool]] = {
    "baseline": dict(use_agcnh=False, use_agcns_concat=False, use_agcns_attention=False),
    "agcn-h": dict(use_agcnh=True, use_agcns_concat=False, use_agcns_attention=False),
    "agcn-h+s[s]": dict(use_agcnh=True, use_agcns_concat=True, use_agcns_attention=False),
    "agcn-h+s[s]+s[a]": dict(
        use_agcnh=True, use_agcns_concat=True, use_agcns_attention=True
    ),
}


def apply_ablation(config: AgcnConfig, name: str) -> AgcnConfig:
    if name not in ABLATIONS:
        raise ArgumentError(f"unknown ablation {name!r}; choose from {list(ABLATIONS)}")
    return AgcnConfig.model_validate({**config.model_dump(), **ABLATIONS[name]})


class TraceRecord(BaseModel):
    iter: int
    loss_total: float
    loss_rec: float
    loss_kl: float
    acc: Optional[float] = None
    nmi: Optional[float] = None
    ari: Optional[float] = None
    f1: Optional[float] = None


class RunMetrics(BaseModel):
    acc: float
    nmi: float
    ari: float
    f1: float


def format_mean_std(mean: float, std: float) -> str:
    return f"{mean:.2f}±{std:.2f}"


class MetricSummary(BaseModel):
    mean: float
    std: float
    runs: List[float]

    @classmethod
    def from_runs(cls, runs: List[float]) -> "MetricSummary":
        values = np.asarray(runs, dtype=np.float64)
        return cls(mean=float(values.mean()), std=float(values.std()), runs=list(runs))

    def formatted(self, factor: float = 1.0) -> str:
        return format_mean_std(self.mean * factor, self.std * factor)


class ClusteringReport(BaseModel):
    acc: MetricSummary
    nmi: MetricSummary
    ari: MetricSummary
    f1: MetricSummary
    metadata: Dict = Field(default_factory=dict)

    def row(self, factor: float = 100.0) -> Dict[str, str]:
        return {
            name: getattr(self, name).formatted(factor)
            for name in ("acc", "nmi", "ari", "f1")
        }


class RunManifest(BaseModel):
    agcn_config: AgcnConfig
    train_config: TrainConfig
    dataset_fingerprint: str
    seeds: List[int]
    version: str
