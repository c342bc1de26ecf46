"""
Feature-correlation graph built from the training rows.
"""
import logging
import os
from collections import Counter
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from core.errors import ConfigError, InsufficientDataError
from core.types import CorrelationMatrix, FeatureGraph, GraphStats

logger = logging.getLogger(__name__)


def pearson_matrix(train_values: np.ndarray, feature_names: Optional[Sequence[str]] = None) -> CorrelationMatrix:
    """
    Pearson correlation between every pair of columns. Pairs involving a
    constant column are 0, and a constant column's diagonal entry is 0.
    """
    x = np.asarray(train_values, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise InsufficientDataError(f"correlation needs at least 2 training rows, got shape {x.shape}")

    varying = ~np.all(x == x[:1], axis=0)
    centered = x - x.mean(axis=0)
    norms = np.sqrt(np.sum(centered * centered, axis=0))
    safe = np.where(varying, norms, 1.0)
    unit = np.where(varying, centered / safe, 0.0)
    corr = unit.T @ unit
    corr = np.clip((corr + corr.T) / 2.0, -1.0, 1.0)
    np.fill_diagonal(corr, np.where(varying, 1.0, 0.0))
    return CorrelationMatrix(values=corr, feature_names=list(feature_names) if feature_names is not None else None)


def threshold_graph(corr: CorrelationMatrix, tau: float = 0.7, signed: bool = False) -> FeatureGraph:
    """
    Edge (u, v), u != v, iff |corr| > tau (or corr > tau when `signed`).
    """
    if not 0.0 < tau <= 1.0:
        raise ConfigError(f"graph threshold must be in (0, 1], got {tau}")
    values = corr.values
    strength = values if signed else np.abs(values)
    upper = np.triu(strength > tau, k=1)
    us, vs = np.nonzero(upper)
    edges = tuple((int(u), int(v)) for u, v in zip(us, vs))
    degrees = np.zeros(values.shape[0], dtype=np.int64)
    for u, v in edges:
        degrees[u] += 1
        degrees[v] += 1
    return FeatureGraph(n_nodes=values.shape[0], edges=edges, degrees=degrees, feature_names=corr.feature_names)


def graph_stats(graph: FeatureGraph) -> GraphStats:
    sizes: np.ndarray = np.zeros(0, dtype=np.int64)
    if graph.n_nodes:
        edges = np.asarray(graph.edges, dtype=np.int64).reshape(-1, 2)
        adjacency = csr_matrix((np.ones(len(edges)), (edges[:, 0], edges[:, 1])),
                               shape=(graph.n_nodes, graph.n_nodes))
        _, labels = connected_components(adjacency, directed=False)
        sizes = np.bincount(labels)

    histogram = dict(sorted(Counter(int(d) for d in graph.degrees).items()))
    return GraphStats(
        n_nodes=graph.n_nodes,
        n_edges=len(graph.edges),
        degree_histogram=histogram,
        isolated=int(np.sum(graph.degrees == 0)),
        component_sizes=sorted((int(s) for s in sizes), reverse=True),
    )


def export_edge_list(graph: FeatureGraph, path: str) -> str:
    """
    Text export: a header comment, one tab-separated feature-name pair per
    edge, then a "# degrees" section with one name/degree pair per node.
    """
    names = graph.feature_names or [f"f{i}" for i in range(graph.n_nodes)]
    lines = [f"# nodes {graph.n_nodes} edges {len(graph.edges)}"]
    lines += [f"{names[u]}\t{names[v]}" for u, v in graph.edges]
    lines.append("# degrees")
    lines += [f"{name}\t{int(d)}" for name, d in zip(names, graph.degrees)]
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    logger.info(f"Graph edge list saved: {path}")
    return path
