"""
Tests for the correlation matrix, threshold graph, graph summary and edge-list export.
"""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from core.errors import ConfigError, InsufficientDataError
from core.types import CorrelationMatrix
from engines import graphbuild
from tests.helpers import make_graph


class TestPearson:
    def test_affine_image_is_fully_correlated(self, rng):
        f1 = rng.normal(size=30)
        corr = graphbuild.pearson_matrix(np.column_stack([f1, 2.0 * f1 + 3.0])).values
        assert corr[0, 1] == pytest.approx(1.0, abs=1e-12)

    def test_negation(self, rng):
        f1 = rng.normal(size=30)
        corr = graphbuild.pearson_matrix(np.column_stack([f1, -f1])).values
        assert corr[0, 1] == pytest.approx(-1.0, abs=1e-12)

    def test_hand_value(self):
        corr = graphbuild.pearson_matrix(np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 2.0], [4.0, 4.0]])).values
        assert corr[0, 1] == pytest.approx(0.9233805168766388, rel=1e-12)

    def test_matches_numpy(self, rng):
        x = rng.normal(size=(50, 7))
        np.testing.assert_allclose(graphbuild.pearson_matrix(x).values, np.corrcoef(x, rowvar=False), atol=1e-12)

    def test_constant_column(self, rng):
        x = np.column_stack([rng.normal(size=10), np.full(10, 4.2)])
        corr = graphbuild.pearson_matrix(x).values
        assert corr[0, 1] == corr[1, 0] == 0.0
        assert corr[1, 1] == 0.0 and corr[0, 0] == 1.0

    def test_symmetric_and_bounded(self, rng):
        corr = graphbuild.pearson_matrix(rng.normal(size=(20, 9))).values
        assert np.array_equal(corr, corr.T)
        assert np.all(np.abs(corr) <= 1.0)

    def test_needs_two_rows(self):
        with pytest.raises(InsufficientDataError):
            graphbuild.pearson_matrix(np.ones((1, 3)))


class TestThresholdGraph:
    def test_anticorrelated_pair_only(self, rng):
        f1 = rng.normal(size=200)
        f3 = rng.normal(size=200)
        corr = graphbuild.pearson_matrix(np.column_stack([f1, -f1, f3]))
        assert abs(corr.values[0, 2]) < 0.7 and abs(corr.values[1, 2]) < 0.7
        graph = graphbuild.threshold_graph(corr)
        assert graph.edges == ((0, 1),)
        assert graph.degrees.tolist() == [1, 1, 0]

    def test_signed_drops_anticorrelation(self, rng):
        f1 = rng.normal(size=50)
        corr = graphbuild.pearson_matrix(np.column_stack([f1, -f1]))
        assert graphbuild.threshold_graph(corr, signed=True).edges == ()

    def test_tau_one_without_perfect_pairs(self, rng):
        corr = graphbuild.pearson_matrix(rng.normal(size=(40, 5)))
        assert graphbuild.threshold_graph(corr, tau=1.0).edges == ()

    def test_identical_features_give_complete_graph(self, rng):
        f = rng.normal(size=25)
        graph = graphbuild.threshold_graph(graphbuild.pearson_matrix(np.tile(f[:, None], (1, 4))))
        assert len(graph.edges) == 6
        assert graph.degrees.tolist() == [3, 3, 3, 3]

    def test_threshold_is_strict(self):
        corr = CorrelationMatrix(values=np.array([[1.0, 0.7], [0.7, 1.0]]))
        assert graphbuild.threshold_graph(corr, tau=0.7).edges == ()

    @pytest.mark.parametrize("tau", [0.0, -0.1, 1.5])
    def test_tau_out_of_range(self, tau):
        with pytest.raises(ConfigError):
            graphbuild.threshold_graph(CorrelationMatrix(values=np.eye(2)), tau=tau)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(min_value=0.01, max_value=1.0), st.floats(min_value=0.01, max_value=1.0),
           st.integers(min_value=0, max_value=2**32 - 1))
    def test_monotone_in_tau(self, tau_a, tau_b, seed):
        low, high = sorted((tau_a, tau_b))
        x = np.random.default_rng(seed).normal(size=(15, 8))
        x[:, 1] += 2.0 * x[:, 0]
        corr = graphbuild.pearson_matrix(x)
        loose = set(graphbuild.threshold_graph(corr, tau=low).edges)
        tight = set(graphbuild.threshold_graph(corr, tau=high).edges)
        assert tight <= loose

    def test_invariant_to_affine_rescaling(self, rng):
        x = rng.normal(size=(60, 6))
        x[:, 2] += x[:, 0]
        x[:, 4] -= 1.5 * x[:, 3]
        scale = np.array([2.0, -0.5, 3.0, 1.0, -4.0, 0.1])
        y = x * scale + 7.0
        a = graphbuild.threshold_graph(graphbuild.pearson_matrix(x), tau=0.5)
        b = graphbuild.threshold_graph(graphbuild.pearson_matrix(y), tau=0.5)
        assert a.edges == b.edges

    def test_degrees_match_adjacency(self, rng):
        graph = graphbuild.threshold_graph(graphbuild.pearson_matrix(rng.normal(size=(8, 10))), tau=0.3)
        adjacency = graph.adjacency()
        assert np.array_equal(adjacency, adjacency.T)
        assert not np.diag(adjacency).any()
        np.testing.assert_array_equal(adjacency.sum(axis=1), graph.degrees)


class TestGraphStats:
    def test_empty_graph(self):
        stats = graphbuild.graph_stats(make_graph(5, []))
        assert stats.n_edges == 0 and stats.isolated == 5
        assert stats.component_sizes == [1] * 5

    def test_complete_graph(self):
        stats = graphbuild.graph_stats(make_graph(4, [(u, v) for u in range(4) for v in range(u + 1, 4)]))
        assert stats.n_edges == 6
        assert stats.degree_histogram == {3: 4}

    def test_path(self):
        graph = make_graph(3, [(0, 1), (1, 2)])
        stats = graphbuild.graph_stats(graph)
        assert graph.degrees.tolist() == [1, 2, 1]
        assert stats.component_sizes == [3]

    def test_disjoint_triangles(self):
        graph = make_graph(8, [(0, 1), (1, 2), (0, 2), (4, 5), (5, 6), (4, 6), (3, 7)])
        stats = graphbuild.graph_stats(graph)
        assert stats.component_sizes == [3, 3, 2]
        assert stats.isolated == 0

    def test_component_sizes_cover_every_node(self, rng):
        graph = graphbuild.threshold_graph(graphbuild.pearson_matrix(rng.normal(size=(6, 20))), tau=0.6)
        stats = graphbuild.graph_stats(graph)
        assert sum(stats.component_sizes) == 20
        assert stats.component_sizes.count(1) >= stats.isolated

    def test_toy_graph(self, toy_graph):
        stats = graphbuild.graph_stats(toy_graph)
        assert stats.component_sizes == [5, 1]
        assert stats.isolated == 1
        assert stats.degree_histogram == {0: 1, 1: 1, 2: 3, 3: 1}


class TestExport:
    def test_edge_list_layout(self, toy_graph, tmp_path):
        path = graphbuild.export_edge_list(toy_graph, str(tmp_path / "out" / "edges.tsv"))
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        assert lines[0] == "# nodes 6 edges 5"
        assert lines[1:6] == ["f0\tf1", "f0\tf3", "f1\tf2", "f2\tf3", "f3\tf4"]
        assert lines[6] == "# degrees"
        assert lines[7:] == ["f0\t2", "f1\t2", "f2\t2", "f3\t3", "f4\t1", "f5\t0"]
