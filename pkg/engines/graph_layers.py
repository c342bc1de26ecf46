"""
GCN and GAT message-passing layers over a frozen feature graph.

Both layers act on node features shaped (..., F, in_ch): every leading
slice (batch element, time step) is processed independently with the same
weights.
"""
import logging
from typing import List, Type

import numpy as np

from core.engine_interface import GraphLayer
from core.errors import DimensionError, NetworkConfigError
from core.types import FeatureGraph, GraphKind
from engines import gradcore as gc

logger = logging.getLogger(__name__)


def gcn_mixing(graph: FeatureGraph) -> np.ndarray:
    """
    Fixed aggregation matrix S with S[v, u] = 1/sqrt(d_v d_u) on edges and
    S[v, v] = 1/d_v, so (S x)_v = x_v/d_v + sum_{u in N_v} x_u/sqrt(d_v d_u).
    Isolated nodes keep their own features (S[v, v] = 1).
    """
    degrees = graph.degrees.astype(np.float64)
    mixing = np.zeros((graph.n_nodes, graph.n_nodes), dtype=np.float64)
    for u, v in graph.edges:
        weight = 1.0 / np.sqrt(degrees[u] * degrees[v])
        mixing[u, v] = weight
        mixing[v, u] = weight
    self_weight = np.where(degrees > 0, 1.0 / np.where(degrees > 0, degrees, 1.0), 1.0)
    mixing[np.diag_indices(graph.n_nodes)] = self_weight
    return mixing


def attention_mask(graph: FeatureGraph) -> np.ndarray:
    """Closed neighborhood {v} + N_v as a boolean (F, F) matrix."""
    return (graph.adjacency() + np.eye(graph.n_nodes)) > 0


class GcnLayer(GraphLayer):
    def __init__(self, graph: FeatureGraph, in_ch: int, out_ch: int, rng: np.random.Generator, name: str = "gcn"):
        super().__init__(graph)
        self.in_ch = in_ch
        self.out_ch = out_ch
        weight = gc.glorot_uniform(rng, (in_ch, out_ch), in_ch, out_ch)
        if in_ch > 1:
            # inputs past the first layer are ReLU outputs (>= 0); a column with a
            # negative sum would start out dead on most nodes
            weight = weight * np.where(weight.sum(axis=0) < 0, -1.0, 1.0)
        self.weight = gc.Parameter(weight, name=f"{name}.W")
        self.mixing = gcn_mixing(graph)

    def __call__(self, node_feats):
        node_feats = gc.as_tensor(node_feats)
        if node_feats.ndim < 2 or node_feats.shape[-2:] != (self.graph.n_nodes, self.in_ch):
            raise DimensionError(
                f"GCN layer expects (..., {self.graph.n_nodes}, {self.in_ch}), got {node_feats.shape}"
            )
        return gc.relu(gc.matmul(gc.node_mix(node_feats, self.mixing), self.weight))

    def parameters(self) -> List[gc.Parameter]:
        return [self.weight]


class GatLayer(GraphLayer):
    """Single-head graph attention with self-loops and LeakyReLU(0.2) logits."""

    def __init__(self, graph: FeatureGraph, in_ch: int, out_ch: int, rng: np.random.Generator, name: str = "gat"):
        super().__init__(graph)
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.weight = gc.Parameter(gc.glorot_uniform(rng, (in_ch, out_ch), in_ch, out_ch), name=f"{name}.W")
        self.attention = gc.Parameter(gc.glorot_uniform(rng, (2 * out_ch,), 2 * out_ch, 1), name=f"{name}.a")
        self.mask = attention_mask(graph)

    def __call__(self, node_feats):
        node_feats = gc.as_tensor(node_feats)
        n = self.graph.n_nodes
        if node_feats.ndim < 2 or node_feats.shape[-2:] != (n, self.in_ch):
            raise DimensionError(f"GAT layer expects (..., {n}, {self.in_ch}), got {node_feats.shape}")

        z = gc.matmul(node_feats, self.weight)                                   # (..., F, out)
        pair = gc.swapaxes(gc.reshape(self.attention, (2, self.out_ch)), 0, 1)   # (out, 2)
        scores = gc.matmul(z, pair)                                              # (..., F, 2)
        lead = scores.shape[:-2]
        target = gc.reshape(gc.select(scores, 0, axis=-1), lead + (n, 1))
        source = gc.reshape(gc.select(scores, 1, axis=-1), lead + (1, n))
        logits = gc.leaky_relu(gc.add(target, source))                           # [v, u]
        alpha = gc.softmax(logits, axis=-1, mask=self.mask)
        return gc.relu(gc.matmul(alpha, z))

    def parameters(self) -> List[gc.Parameter]:
        return [self.weight, self.attention]


_LAYERS = {GraphKind.GCN: GcnLayer, GraphKind.GAT: GatLayer}


def get_graph_layer(kind: GraphKind, graph: FeatureGraph, in_ch: int, out_ch: int,
                    rng: np.random.Generator, name: str) -> GraphLayer:
    """
    Factory method to get the layer class registered for `kind`.
    """
    try:
        layer_cls: Type[GraphLayer] = _LAYERS[GraphKind(kind)]
    except (KeyError, ValueError):
        raise NetworkConfigError(f"unknown graph layer kind {kind!r}") from None
    return layer_cls(graph, in_ch, out_ch, rng, name=name)
