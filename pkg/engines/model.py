"""
Network assembly from a declarative NetworkConfig.

Working tensor protocol, per sample (a leading batch axis is always present):
    before graph pooling   (time, nodes, channels), channels = 1 at the input
    after node collapse    (time, channels)

ConvBlock runs along time independently for every node (weights shared
across nodes) while the node axis exists, and over channels afterwards.
GraphStack runs independently for every time step (weights shared across
time). GraphPool and DailyDense collapse the node axis. The final tensor is
flattened and mapped by an optional hidden layer and the dense head.
"""
import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

from core.errors import NetworkConfigError
from core.types import (
    ConvBlock,
    DailyDense,
    FeatureGraph,
    GraphKind,
    GraphPool,
    GraphPoolKind,
    GraphStack,
    HeadKind,
    NetworkConfig,
    PredictionSeries,
)
from engines import container
from engines import gradcore as gc
from engines.graph_layers import get_graph_layer

logger = logging.getLogger(__name__)

N_INDICES = 5
GAT_CHANNELS = (30, 10)
GAT_CHANNELS_SHORT = (20, 10)
GCN_CHANNELS = (10, 7, 2, 3, 5, 5)
DEFAULT_HIDDEN = 16

# Row order of the result tables.
PRESET_FAMILIES: Dict[str, str] = {
    "CNN_2D": "2D-CNNpred",
    "CNN_3D": "3D-CNNpred",
    "GAT": "GAT",
    "GCN": "GCN",
    "GAT_CNN": "GAT-CNNpred",
    "CNN_GAT": "GAT-CNNpred",
    "CNN_GAT_CNN": "GAT-CNNpred",
    "GCN_CNN": "GCN-CNNpred",
    "CNN_GCN": "GCN-CNNpred",
    "CNN_GCN_CNN": "GCN-CNNpred",
}
PRESETS: Tuple[str, ...] = tuple(PRESET_FAMILIES)


def preset(
    name: str,
    window: int = 60,
    n_features: int = 138,
    head: HeadKind = HeadKind.BINARY5,
    pooling: GraphPoolKind = GraphPoolKind.MEAN,
    kernel: Optional[int] = None,
    hidden_units: int = DEFAULT_HIDDEN,
) -> NetworkConfig:
    """
    Named layouts. Graph-CNN presets use 5x1 convolutions and the CNNpred
    baselines 3x1; `kernel` overrides both (toy windows need short kernels).
    """
    pool = GraphPool(GraphPoolKind(pooling))
    k5 = kernel or 5
    k3 = kernel or 3
    conv = ConvBlock(8, k5, 2)
    gat = GraphStack(GraphKind.GAT, GAT_CHANNELS)
    gcn = GraphStack(GraphKind.GCN, GCN_CHANNELS)
    hidden = None

    if name == "GAT_CNN":
        layout = (gat, pool, conv, conv)
    elif name == "CNN_GAT":
        layout = (conv, conv, gat, pool)
    elif name == "CNN_GAT_CNN":
        layout = (conv, GraphStack(GraphKind.GAT, GAT_CHANNELS_SHORT), pool, conv)
    elif name == "GCN_CNN":
        layout = (gcn, pool, conv, conv)
    elif name == "CNN_GCN":
        layout = (conv, conv, gcn, pool)
    elif name == "CNN_GCN_CNN":
        layout = (conv, gcn, pool, conv)
    elif name == "GAT":
        layout, hidden = (gat, pool), hidden_units
    elif name == "GCN":
        layout, hidden = (gcn, pool), hidden_units
    elif name == "CNN_2D":
        layout = (DailyDense(8), ConvBlock(8, k3, 2), ConvBlock(8, k3, 2))
    elif name == "CNN_3D":
        layout = (ConvBlock(8, k3, 2), DailyDense(8), ConvBlock(8, k3, 2))
    else:
        raise NetworkConfigError(f"unknown preset {name!r}; choose from {list(PRESETS)}")
    return NetworkConfig(layout=layout, head=HeadKind(head), window=window, n_features=n_features,
                         hidden_units=hidden, name=name)


def _stage_label(index: int, stage) -> str:
    if isinstance(stage, GraphStack):
        return f"{index}:GraphStack[{stage.kind.value}]"
    if isinstance(stage, GraphPool):
        return f"{index}:GraphPool[{stage.kind.value}]"
    return f"{index}:{type(stage).__name__}"


def infer_shapes(config: NetworkConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """
    Per-sample tensor shape after every step, derived from the config alone.
    Raises NetworkConfigError for any layout that cannot run.
    """
    if config.window < 1 or config.n_features < 1:
        raise NetworkConfigError(f"window and feature count must be positive ({config.window}, {config.n_features})")
    shape: Tuple[int, ...] = (config.window, config.n_features, 1)
    trace = [("input", shape)]
    seen_stack = False
    seen_pool = False
    layout = config.layout

    for i, stage in enumerate(layout):
        label = _stage_label(i, stage)
        has_nodes = len(shape) == 3
        if isinstance(stage, ConvBlock):
            if stage.filters < 1 or stage.kernel < 1 or stage.pool < 1:
                raise NetworkConfigError(f"{label}: filters, kernel and pool must be positive")
            time = shape[0]
            if time < stage.kernel:
                raise NetworkConfigError(f"{label}: window too short, {time} steps for kernel {stage.kernel}")
            conv_time = time - stage.kernel + 1
            if conv_time < stage.pool:
                raise NetworkConfigError(f"{label}: window too short, {conv_time} steps for pool {stage.pool}")
            time = conv_time // stage.pool
            shape = (time, shape[1], stage.filters) if has_nodes else (time, stage.filters)
            trace.append((label, shape))
        elif isinstance(stage, GraphStack):
            if seen_stack:
                raise NetworkConfigError(f"{label}: only one GraphStack is allowed")
            if not has_nodes:
                raise NetworkConfigError(f"{label}: node axis already collapsed")
            if not stage.channels or min(stage.channels) < 1:
                raise NetworkConfigError(f"{label}: channels must be a non-empty list of positive sizes")
            nxt = layout[i + 1] if i + 1 < len(layout) else None
            if not isinstance(nxt, GraphPool):
                raise NetworkConfigError(f"{label}: must be followed immediately by a GraphPool")
            seen_stack = True
            for j, ch in enumerate(stage.channels):
                shape = (shape[0], shape[1], ch)
                trace.append((f"{label}.{j}", shape))
        elif isinstance(stage, GraphPool):
            if seen_pool or not seen_stack or not isinstance(layout[i - 1], GraphStack):
                raise NetworkConfigError(f"{label}: a single GraphPool must directly follow the GraphStack")
            seen_pool = True
            shape = (shape[0], shape[2])
            trace.append((label, shape))
        elif isinstance(stage, DailyDense):
            if not has_nodes:
                raise NetworkConfigError(f"{label}: node axis already collapsed")
            if stage.filters < 1:
                raise NetworkConfigError(f"{label}: filters must be positive")
            shape = (shape[0], stage.filters)
            trace.append((label, shape))
        else:
            raise NetworkConfigError(f"{label}: unknown stage type {type(stage).__name__}")

    flat = int(np.prod(shape))
    trace.append(("flatten", (flat,)))
    if config.hidden_units:
        trace.append(("hidden", (config.hidden_units,)))
    trace.append(("head", (N_INDICES,) if config.head is HeadKind.BINARY5 else (N_INDICES, 3)))
    return trace


class Network:
    """A built network: parameters plus the forward pass for one NetworkConfig and graph."""

    def __init__(self, config: NetworkConfig, graph: Optional[FeatureGraph], seed: int = 0):
        self.config = config
        self.graph = graph
        self.shapes = infer_shapes(config)
        if any(isinstance(s, GraphStack) for s in config.layout):
            if graph is None or graph.n_nodes != config.n_features:
                raise NetworkConfigError(
                    f"graph layers need a feature graph with {config.n_features} nodes"
                )
        rng = np.random.default_rng(seed)
        self._params: List[gc.Parameter] = []
        self._modules: List[Tuple[object, object]] = []

        shape = (config.window, config.n_features, 1)
        for i, stage in enumerate(config.layout):
            prefix = f"s{i}"
            if isinstance(stage, ConvBlock):
                in_ch = shape[-1]
                kernels = self._param(gc.glorot_uniform(rng, (stage.kernel, in_ch, stage.filters),
                                                        stage.kernel * in_ch, stage.kernel * stage.filters),
                                      f"{prefix}.conv.K")
                bias = self._param(np.zeros(stage.filters), f"{prefix}.conv.b")
                self._modules.append((stage, (kernels, bias)))
                time = (shape[0] - stage.kernel + 1) // stage.pool
                shape = (time, shape[1], stage.filters) if len(shape) == 3 else (time, stage.filters)
            elif isinstance(stage, GraphStack):
                layers = []
                in_ch = shape[-1]
                for j, ch in enumerate(stage.channels):
                    layer = get_graph_layer(stage.kind, graph, in_ch, ch, rng, name=f"{prefix}.{stage.kind.value}{j}")
                    self._params.extend(layer.parameters())
                    layers.append(layer)
                    in_ch = ch
                self._modules.append((stage, layers))
                shape = (shape[0], shape[1], in_ch)
            elif isinstance(stage, GraphPool):
                weight = None
                if stage.kind is GraphPoolKind.FULLY_CONNECTED:
                    n = config.n_features
                    weight = self._param(gc.glorot_uniform(rng, (n,), n, 1), f"{prefix}.pool.w")
                self._modules.append((stage, weight))
                shape = (shape[0], shape[2])
            elif isinstance(stage, DailyDense):
                fan_in = shape[1] * shape[2]
                weight = self._param(gc.glorot_uniform(rng, (fan_in, stage.filters), fan_in, stage.filters),
                                     f"{prefix}.daily.W")
                bias = self._param(np.zeros(stage.filters), f"{prefix}.daily.b")
                self._modules.append((stage, (weight, bias)))
                shape = (shape[0], stage.filters)

        flat = int(np.prod(shape))
        self.hidden = None
        if config.hidden_units:
            self.hidden = (
                self._param(gc.glorot_uniform(rng, (flat, config.hidden_units), flat, config.hidden_units), "hidden.W"),
                self._param(np.zeros(config.hidden_units), "hidden.b"),
            )
            flat = config.hidden_units
        out = N_INDICES if config.head is HeadKind.BINARY5 else N_INDICES * 3
        self.head = (
            self._param(gc.glorot_uniform(rng, (flat, out), flat, out), "head.W"),
            self._param(np.zeros(out), "head.b"),
        )

    def _param(self, value: np.ndarray, name: str) -> gc.Parameter:
        param = gc.Parameter(value, name=name)
        self._params.append(param)
        return param

    def parameters(self) -> List[gc.Parameter]:
        return list(self._params)

    # ──────────────────────────────────────────────
    # Forward
    # ──────────────────────────────────────────────

    def forward(self, inputs, trace: Optional[List[Tuple[str, Tuple[int, ...]]]] = None) -> gc.Tensor:
        """
        inputs: (batch, window, F). Returns (batch, 5) probabilities for
        BINARY5 or (batch, 5, 3) per-index distributions for TERNARY15.
        When `trace` is a list, per-sample shapes are appended to it.
        """
        x = gc.as_tensor(inputs)
        expected = (self.config.window, self.config.n_features)
        if x.ndim != 3 or x.shape[1:] != expected:
            raise NetworkConfigError(f"network expects input (batch, {expected[0]}, {expected[1]}), got {x.shape}")
        batch = x.shape[0]
        x = gc.reshape(x, x.shape + (1,))
        self._trace(trace, "input", x)

        for i, (stage, params) in enumerate(self._modules):
            label = _stage_label(i, stage)
            if isinstance(stage, ConvBlock):
                x = self._conv_block(x, stage, *params)
                self._trace(trace, label, x)
            elif isinstance(stage, GraphStack):
                for j, layer in enumerate(params):
                    x = layer(x)
                    self._trace(trace, f"{label}.{j}", x)
            elif isinstance(stage, GraphPool):
                x = graph_pool(x, stage.kind, params)
                self._trace(trace, label, x)
            elif isinstance(stage, DailyDense):
                weight, bias = params
                flat_nodes = gc.reshape(x, (batch, x.shape[1], x.shape[2] * x.shape[3]))
                x = gc.relu(gc.add(gc.matmul(flat_nodes, weight), bias))
                self._trace(trace, label, x)

        x = gc.reshape(x, (batch, int(np.prod(x.shape[1:]))))
        self._trace(trace, "flatten", x)
        if self.hidden is not None:
            x = gc.relu(gc.add(gc.matmul(x, self.hidden[0]), self.hidden[1]))
            self._trace(trace, "hidden", x)
        logits = gc.add(gc.matmul(x, self.head[0]), self.head[1])
        if self.config.head is HeadKind.BINARY5:
            out = gc.sigmoid(logits)
        else:
            out = gc.softmax(gc.reshape(logits, (batch, N_INDICES, 3)), axis=-1)
        self._trace(trace, "head", out)
        return out

    __call__ = forward

    @staticmethod
    def _trace(trace, label, tensor):
        if trace is not None:
            trace.append((label, tuple(tensor.shape[1:])))

    @staticmethod
    def _conv_block(x: gc.Tensor, stage: ConvBlock, kernels, bias) -> gc.Tensor:
        if x.ndim == 4:
            # (batch, time, nodes, ch) -> per-node sequences along time
            per_node = gc.swapaxes(x, 1, 2)
            out = conv_block(per_node, kernels, bias, stage.pool)
            return gc.swapaxes(out, 1, 2)
        return conv_block(x, kernels, bias, stage.pool)

    # ──────────────────────────────────────────────
    # Inference and persistence
    # ──────────────────────────────────────────────

    def predict(self, inputs: np.ndarray, dates: List[str], batch_size: int = 64) -> PredictionSeries:
        outputs = []
        for start in range(0, len(inputs), batch_size):
            outputs.append(self.forward(inputs[start:start + batch_size]).data)
        stacked = np.concatenate(outputs, axis=0) if outputs else np.zeros((0, N_INDICES))
        return PredictionSeries(dates=list(dates), outputs=stacked,
                                classes=discretize(stacked, self.config.head), head=self.config.head)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {p.name: p.data for p in self._params}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = [p.name for p in self._params if p.name not in state]
        if missing:
            raise NetworkConfigError(f"weights are missing parameter(s) {missing}")
        for p in self._params:
            p.assign(np.asarray(state[p.name]))

    def save(self, path: str, extra_meta: Optional[Dict] = None) -> str:
        meta = {"config_hash": self.config.hash, "config": self.config.to_dict()}
        meta.update(extra_meta or {})
        return container.save(path, self.state_dict(), meta)

    def load(self, path: str) -> Dict:
        state, meta = container.load(path)
        if meta.get("config_hash") != self.config.hash:
            raise NetworkConfigError(
                f"{path} holds weights for config {meta.get('config_hash')}, network is {self.config.hash}"
            )
        self.load_state_dict(state)
        return meta


def conv_block(x, kernels, bias, pool: int = 2) -> gc.Tensor:
    """conv1d -> relu -> maxpool1d along axis -2 of (..., time, ch)."""
    return gc.maxpool1d(gc.relu(gc.conv1d(x, kernels, bias)), pool)


def graph_pool(node_feats, kind: GraphPoolKind, weight: Optional[gc.Tensor] = None) -> gc.Tensor:
    """Collapses the node axis (-2) of (..., F, ch) to (..., ch)."""
    node_feats = gc.as_tensor(node_feats)
    kind = GraphPoolKind(kind)
    if kind is GraphPoolKind.MEAN:
        return gc.reduce_mean(node_feats, axis=-2)
    if kind is GraphPoolKind.MAX:
        return gc.reduce_max(node_feats, axis=-2)
    if weight is None:
        raise NetworkConfigError("fully connected pooling needs a weight vector")
    n = node_feats.shape[-2]
    pooled = gc.matmul(gc.swapaxes(node_feats, -1, -2), gc.reshape(weight, (n, 1)))
    return gc.reshape(pooled, node_feats.shape[:-2] + (node_feats.shape[-1],))


def discretize(outputs: np.ndarray, head: HeadKind) -> np.ndarray:
    """BINARY5: 1 iff p >= 0.5. TERNARY15: per-index argmax, ties to the lowest class."""
    outputs = np.asarray(outputs)
    if HeadKind(head) is HeadKind.BINARY5:
        return (outputs >= 0.5).astype(np.int64)
    return np.argmax(outputs, axis=-1).astype(np.int64)

