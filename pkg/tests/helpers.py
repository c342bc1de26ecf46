import numpy as np

from core.types import FeatureGraph, WindowSample


def make_graph(n_nodes, edges):
    edges = tuple(sorted((min(u, v), max(u, v)) for u, v in edges))
    degrees = np.zeros(n_nodes, dtype=np.int64)
    for u, v in edges:
        degrees[u] += 1
        degrees[v] += 1
    return FeatureGraph(n_nodes=n_nodes, edges=edges, degrees=degrees,
                        feature_names=[f"f{i}" for i in range(n_nodes)])


def random_graph(rng, n_nodes, p=0.4):
    edges = [(u, v) for u in range(n_nodes) for v in range(u + 1, n_nodes) if rng.random() < p]
    return make_graph(n_nodes, edges)


def permute_graph(graph, perm):
    """Relabels node perm[i] as node i."""
    inverse = np.argsort(perm)
    return make_graph(graph.n_nodes, [(int(inverse[u]), int(inverse[v])) for u, v in graph.edges])


def separable_samples(rng, n, window, n_features, margin=0.5, head_classes=2):
    """
    Windows whose label on every index is the sign of one fixed linear
    functional of the window (its sum). Samples within `margin` of the
    decision boundary are dropped.
    """
    samples = []
    while len(samples) < n:
        x = rng.normal(size=(window, n_features))
        score = x.sum() / np.sqrt(x.size)
        if abs(score) < margin:
            continue
        if head_classes == 2:
            label = 1 if score > 0 else 0
        else:
            label = 2 if score > 0 else 0
        samples.append(WindowSample(inputs=x, labels=np.full(5, label, dtype=np.int64),
                                    returns=np.full(5, 0.01 if score > 0 else -0.01),
                                    anchor_date=f"d{len(samples):05d}", anchor_index=len(samples)))
    return samples
