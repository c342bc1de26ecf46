"""
Domain dataclasses passed between the engines.
"""
import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

MARKETS: Tuple[str, ...] = ("SP500", "DJI", "NASDAQ", "NYSE", "RUSSELL")


def config_hash(payload: Dict[str, Any]) -> str:
    """First 16 hex chars of sha256 over canonical JSON."""
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


# ──────────────────────────────────────────────
# Data preparation
# ──────────────────────────────────────────────

@dataclass
class RawMarketTable:
    market: str
    frame: pd.DataFrame  # DatetimeIndex named "Date", one column per feature

    @property
    def dates(self) -> List[str]:
        return [d.strftime("%Y-%m-%d") for d in self.frame.index]

    def __len__(self) -> int:
        return len(self.frame)


class PanelMode(str, enum.Enum):
    SINGLE = "single"
    COMBINED = "combined"


@dataclass
class AlignedPanel:
    dates: List[str]
    values: np.ndarray          # (T, F_total)
    feature_names: List[str]
    closes: np.ndarray          # (T, 5) in MARKETS order
    mode: PanelMode
    market: Optional[str] = None

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return len(self.dates)


class LabelScheme(str, enum.Enum):
    BINARY01 = "01"
    TERNARY012 = "012"


@dataclass
class LabelSet:
    labels: np.ndarray                      # (T_labeled, 5) int64
    returns: np.ndarray                     # (T_labeled, 5) realized returns behind each label
    scheme: LabelScheme
    thresholds: Optional[np.ndarray] = None  # (5, 2) low/high, ternary only


@dataclass
class WindowSample:
    inputs: np.ndarray      # (d, F) normalized
    labels: np.ndarray      # (5,)
    returns: np.ndarray     # (5,) realized return the labels were cut from
    anchor_date: str
    anchor_index: int


@dataclass(frozen=True)
class SplitSpec:
    train: float
    validation: float
    test: float
    name: str = "custom"

    def __post_init__(self):
        fractions = (self.train, self.validation, self.test)
        if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
            from core.errors import ConfigError
            raise ConfigError(f"split fractions must be positive and sum to 1, got {fractions}")


SPLIT_65_15_20 = SplitSpec(0.65, 0.15, 0.20, name="65-15-20")
SPLIT_42_8_50 = SplitSpec(0.42, 0.08, 0.50, name="42-8-50")
SPLIT_PRESETS: Dict[str, SplitSpec] = {s.name: s for s in (SPLIT_65_15_20, SPLIT_42_8_50)}


# ──────────────────────────────────────────────
# Feature graph
# ──────────────────────────────────────────────

@dataclass
class CorrelationMatrix:
    values: np.ndarray                       # (F, F)
    feature_names: Optional[List[str]] = None


@dataclass
class FeatureGraph:
    n_nodes: int
    edges: Tuple[Tuple[int, int], ...]       # u < v, sorted
    degrees: np.ndarray                      # (F,) int64
    feature_names: Optional[List[str]] = None

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.n_nodes, self.n_nodes), dtype=np.float64)
        for u, v in self.edges:
            adj[u, v] = 1.0
            adj[v, u] = 1.0
        return adj


@dataclass
class GraphStats:
    n_nodes: int
    n_edges: int
    degree_histogram: Dict[int, int]
    isolated: int
    component_sizes: List[int]               # descending


# ──────────────────────────────────────────────
# Network configuration
# ──────────────────────────────────────────────

class GraphPoolKind(str, enum.Enum):
    MEAN = "mean"
    MAX = "max"
    FULLY_CONNECTED = "fc"


class GraphKind(str, enum.Enum):
    GCN = "gcn"
    GAT = "gat"


class HeadKind(str, enum.Enum):
    BINARY5 = "binary5"
    TERNARY15 = "ternary15"

    @property
    def scheme(self) -> LabelScheme:
        return LabelScheme.BINARY01 if self is HeadKind.BINARY5 else LabelScheme.TERNARY012

    @property
    def n_classes(self) -> int:
        return 2 if self is HeadKind.BINARY5 else 3


@dataclass(frozen=True)
class ConvBlock:
    filters: int = 8
    kernel: int = 5
    pool: int = 2


@dataclass(frozen=True)
class GraphStack:
    kind: GraphKind
    channels: Tuple[int, ...]


@dataclass(frozen=True)
class GraphPool:
    kind: GraphPoolKind = GraphPoolKind.MEAN


@dataclass(frozen=True)
class DailyDense:
    filters: int = 8


Stage = Union[ConvBlock, GraphStack, GraphPool, DailyDense]


@dataclass(frozen=True)
class NetworkConfig:
    layout: Tuple[Stage, ...]
    head: HeadKind
    window: int
    n_features: int
    hidden_units: Optional[int] = None
    name: str = "custom"

    def to_dict(self) -> Dict[str, Any]:
        stages = []
        for stage in self.layout:
            entry = {"stage": type(stage).__name__}
            entry.update({k: (v.value if isinstance(v, enum.Enum) else list(v) if isinstance(v, tuple) else v)
                          for k, v in asdict(stage).items()})
            stages.append(entry)
        return {
            "name": self.name,
            "layout": stages,
            "head": self.head.value,
            "window": self.window,
            "n_features": self.n_features,
            "hidden_units": self.hidden_units,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "NetworkConfig":
        from core.errors import NetworkConfigError
        stages = []
        try:
            for entry in payload["layout"]:
                fields = {k: v for k, v in entry.items() if k != "stage"}
                kind = entry["stage"]
                if kind == "ConvBlock":
                    stages.append(ConvBlock(**fields))
                elif kind == "GraphStack":
                    stages.append(GraphStack(GraphKind(fields["kind"]), tuple(fields["channels"])))
                elif kind == "GraphPool":
                    stages.append(GraphPool(GraphPoolKind(fields["kind"])))
                elif kind == "DailyDense":
                    stages.append(DailyDense(**fields))
                else:
                    raise NetworkConfigError(f"unknown stage {kind!r}")
            return cls(layout=tuple(stages), head=HeadKind(payload["head"]), window=int(payload["window"]),
                       n_features=int(payload["n_features"]), hidden_units=payload.get("hidden_units"),
                       name=payload.get("name", "custom"))
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, NetworkConfigError):
                raise
            raise NetworkConfigError(f"malformed network config: {e}") from e

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


@dataclass
class PredictionSeries:
    dates: List[str]
    outputs: np.ndarray          # (n, 5) probabilities or (n, 5, 3) group scores
    classes: np.ndarray          # (n, 5)
    head: HeadKind


# ──────────────────────────────────────────────
# Training
# ──────────────────────────────────────────────

@dataclass
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 20
    learning_rate: float = 1e-3
    seeds: Tuple[int, ...] = (1, 2, 3, 4, 5)
    split: SplitSpec = SPLIT_65_15_20
    head: HeadKind = HeadKind.BINARY5
    preset: str = "GAT_CNN"
    micro_batch: int = 8         # samples per tape inside one batch

    def __post_init__(self):
        from core.errors import ConfigError
        if self.batch_size < 1 or self.micro_batch < 1:
            raise ConfigError(f"batch_size and micro_batch must be >= 1, got {self.batch_size}, {self.micro_batch}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.patience >= self.max_epochs:
            raise ConfigError(f"patience ({self.patience}) must be smaller than max_epochs ({self.max_epochs})")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_metric: float
    improved: bool


NO_POOLING = "none"   # pooling label of layouts without a graph stage


@dataclass
class JobResult:
    preset: str
    seed: int
    f_measures: Optional[np.ndarray]          # (5,) test macro-F per index, None when the job failed
    weights_path: Optional[str] = None
    predictions_path: Optional[str] = None
    error: Optional[str] = None
    pooling: str = NO_POOLING
    val_score: Optional[float] = None         # best validation score of the run

    @property
    def key(self) -> Tuple[str, str, int]:
        return self.preset, self.pooling, self.seed


@dataclass
class ExperimentResult:
    jobs: List[JobResult] = field(default_factory=list)

    def presets(self) -> List[str]:
        return list(dict.fromkeys(job.preset for job in self.jobs))

    def poolings(self, preset: str) -> List[str]:
        return list(dict.fromkeys(job.pooling for job in self.jobs if job.preset == preset))

    def selected_pooling(self, preset: str) -> str:
        """
        Pooling variant of `preset` with the highest mean validation score
        over its successful seeds; the first variant wins ties.
        """
        best, best_score = None, -math.inf
        for pooling in self.poolings(preset):
            scores = [job.val_score for job in self.jobs
                      if job.preset == preset and job.pooling == pooling
                      and job.f_measures is not None and job.val_score is not None]
            score = float(np.mean(scores)) if scores else -math.inf
            if best is None or score > best_score:
                best, best_score = pooling, score
        return best if best is not None else NO_POOLING

    def aggregate(self, preset: str, pooling: Optional[str] = None) -> Tuple[Optional[np.ndarray], Optional[np.ndarray]]:
        """(mean, best) per index over the successful seeds of one variant, by default the selected one."""
        pooling = self.selected_pooling(preset) if pooling is None else pooling
        rows = [job.f_measures for job in self.jobs
                if job.preset == preset and job.pooling == pooling and job.f_measures is not None]
        if not rows:
            return None, None
        stacked = np.vstack(rows)
        return stacked.mean(axis=0), stacked.max(axis=0)


# ──────────────────────────────────────────────
# Backtest
# ──────────────────────────────────────────────

@dataclass
class PositionSeries:
    dates: List[str]
    positions: np.ndarray        # (n,) or (n, 5) in {-1, 0, +1}


@dataclass
class PnlSeries:
    dates: List[str]
    values: np.ndarray           # (n,)


@dataclass(frozen=True)
class CeqParams:
    gamma: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            from core.errors import ConfigError
            raise ConfigError(f"risk aversion must be non-negative, got {self.gamma}")


@dataclass
class MetricCell:
    sharpe: Optional[float]           # None when undefined (zero variance)
    annual_sharpe: Optional[float]
    ceq: float


@dataclass
class BacktestRow:
    strategy: str
    cells: Dict[str, MetricCell]      # keyed by market name and "Combination"
    pnl: Dict[str, PnlSeries] = field(default_factory=dict)


@dataclass
class BacktestReport:
    rows: List[BacktestRow] = field(default_factory=list)
    gamma: float = 1.0
