"""
Tests for losses, macro-F, the training loop and the multi-seed experiment runner.
"""
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from batch_processor import ExperimentRunner, run_experiments
from core.errors import DimensionError, MetricError, NetworkConfigError, NonFiniteLossError
from core.types import NO_POOLING, SPLIT_65_15_20, GraphPoolKind, HeadKind, LabelScheme, PanelMode, TrainConfig
from engines import dataprep, report
from engines import gradcore as gc
from engines.model import PRESETS, Network, preset
from engines.trainer import (
    batch_gradients,
    evaluate,
    loss_binary,
    loss_ternary,
    macro_f,
    per_index_f,
    stack_samples,
    train,
)
from tests.helpers import separable_samples


def toy_network(graph, name="GCN_CNN", head=HeadKind.BINARY5, seed=0, window=8):
    return Network(preset(name, window=window, n_features=6, kernel=2, head=head), graph, seed=seed)


# =============================================================================
# Losses
# =============================================================================

class TestLosses:
    def test_binary_uninformative(self):
        loss = loss_binary(np.full(5, 0.5), np.array([1, 0, 1, 1, 0]))
        assert loss.item() == pytest.approx(math.log(2.0), rel=1e-12)

    def test_binary_hand_value(self):
        loss = loss_binary(np.array([0.9, 0.5, 0.5, 0.5, 0.5]), np.array([1, 0, 0, 0, 0]))
        assert loss.item() == pytest.approx((-math.log(0.9) + 4 * math.log(2.0)) / 5, rel=1e-12)
        assert loss.item() == pytest.approx(0.5755898, abs=1e-7)

    def test_binary_perfect(self):
        labels = np.array([1, 0, 1, 0, 0])
        assert loss_binary(labels.astype(float), labels).item() == 0.0

    def test_ternary_uniform(self):
        loss = loss_ternary(np.full((5, 3), 1.0 / 3.0), np.array([0, 1, 2, 1, 0]))
        assert loss.item() == pytest.approx(math.log(3.0), rel=1e-12)

    def test_ternary_hand_value(self):
        probs = np.full((5, 3), 1.0 / 3.0)
        probs[0] = [0.7, 0.2, 0.1]
        loss = loss_ternary(probs, np.array([0, 2, 2, 1, 0]))
        assert loss.item() == pytest.approx(0.9502248, abs=1e-7)

    def test_ternary_one_hot(self):
        labels = np.array([2, 0, 1, 1, 2])
        assert loss_ternary(np.eye(3)[labels], labels).item() == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            loss_binary(np.full((2, 5), 0.5), np.zeros((5,)))
        with pytest.raises(DimensionError):
            loss_ternary(np.full((2, 5, 3), 0.2), np.zeros((2, 4)))

    def test_gradients(self, rng):
        p = gc.Tensor(rng.uniform(0.1, 0.9, size=(3, 5)), requires_grad=True)
        y = rng.integers(0, 2, size=(3, 5))
        assert gc.grad_check(lambda: loss_binary(p, y), [p]) < 1e-6


# =============================================================================
# Metrics
# =============================================================================

class TestMacroF:
    def test_hand_confusion(self):
        assert macro_f([1, 0, 0, 0], [1, 1, 0, 0]) == pytest.approx((2 / 3 + 0.8) / 2, rel=1e-12)

    def test_perfect(self):
        assert macro_f([0, 1, 1, 0], [0, 1, 1, 0]) == 1.0

    def test_constant_prediction(self):
        assert macro_f([1, 1, 1, 1], [1, 1, 0, 0]) == pytest.approx(1 / 3, rel=1e-12)

    def test_empty(self):
        with pytest.raises(MetricError):
            macro_f([], [])

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            macro_f([1, 0], [1])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.integers(0, 2), st.integers(0, 2)), min_size=1, max_size=30),
           st.permutations([0, 1, 2]))
    def test_relabeling_invariance(self, pairs, perm):
        preds = np.array([p for p, _ in pairs])
        labels = np.array([y for _, y in pairs])
        mapping = np.array(perm)
        original = macro_f(preds, labels, (0, 1, 2))
        relabeled = macro_f(mapping[preds], mapping[labels], (0, 1, 2))
        assert relabeled == pytest.approx(original, abs=1e-12)

    def test_per_index(self):
        classes = np.array([[1, 0, 1, 0, 1], [0, 0, 1, 1, 1]])
        labels = np.array([[1, 0, 1, 0, 1], [0, 1, 1, 0, 0]])
        scores = per_index_f(classes, labels, HeadKind.BINARY5)
        assert scores.shape == (5,)
        assert scores[0] == 1.0 and scores[2] == 0.5

    def test_stack_needs_samples(self):
        with pytest.raises(MetricError):
            stack_samples([])


# =============================================================================
# Training loop
# =============================================================================

class TestTraining:
    def test_micro_batches_match_one_tape(self, toy_graph, rng):
        network = toy_network(toy_graph)
        samples = separable_samples(rng, 7, 8, 6)
        x, y = stack_samples(samples)
        whole_loss, whole = batch_gradients(network, x, y, micro_batch=7)
        split_loss, split = batch_gradients(network, x, y, micro_batch=3)
        assert split_loss == pytest.approx(whole_loss, rel=1e-12)
        for a, b in zip(whole, split):
            np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-13)

    def test_patience_zero_stops_at_first_miss(self, toy_graph, rng):
        samples = separable_samples(rng, 24, 8, 6)
        cfg = TrainConfig(batch_size=8, max_epochs=30, patience=0, seeds=(1,))
        result = train(toy_network(toy_graph), samples[:16], samples[16:], cfg, seed=1)
        flags = [r.improved for r in result.history]
        assert flags[0] is True
        if len(flags) < cfg.max_epochs:
            assert flags[-1] is False
            assert all(flags[:-1])

    def test_restores_best_weights(self, toy_graph, rng):
        samples = separable_samples(rng, 30, 8, 6)
        cfg = TrainConfig(batch_size=8, max_epochs=6, patience=5, seeds=(1,))
        network = toy_network(toy_graph)
        result = train(network, samples[:20], samples[20:], cfg, seed=3)
        x_val, y_val = stack_samples(samples[20:])
        final = evaluate(network, x_val, y_val).macro_f
        assert final == result.best_score
        assert all(final >= r.val_metric for r in result.history)

    def test_ternary_selects_on_validation_loss(self, toy_graph, rng):
        samples = separable_samples(rng, 30, 8, 6, head_classes=3)
        cfg = TrainConfig(batch_size=10, max_epochs=4, patience=3, seeds=(1,), head=HeadKind.TERNARY15)
        result = train(toy_network(toy_graph, head=HeadKind.TERNARY15), samples[:20], samples[20:], cfg, seed=2)
        best = result.history[result.best_epoch - 1]
        assert result.best_score == -best.val_loss
        assert best.val_loss == min(r.val_loss for r in result.history)

    def test_no_improving_epoch_keeps_initial_weights(self, toy_graph, rng):
        samples = separable_samples(rng, 24, 8, 6, head_classes=3)
        for sample in samples[16:]:
            sample.inputs = np.full((8, 6), np.nan)
        cfg = TrainConfig(batch_size=8, max_epochs=3, patience=1, seeds=(1,), head=HeadKind.TERNARY15)
        network = toy_network(toy_graph, head=HeadKind.TERNARY15, seed=6)
        initial = {k: v.copy() for k, v in network.state_dict().items()}
        result = train(network, samples[:16], samples[16:], cfg, seed=6)
        assert result.best_epoch == 0
        assert not any(r.improved for r in result.history)
        assert all(np.array_equal(network.state_dict()[k], initial[k]) for k in initial)

    def test_same_seed_same_history(self, toy_graph, rng):
        samples = separable_samples(rng, 24, 8, 6)
        cfg = TrainConfig(batch_size=8, max_epochs=3, patience=2, seeds=(1,))
        runs = []
        for _ in range(2):
            network = toy_network(toy_graph, seed=5)
            runs.append((train(network, samples[:16], samples[16:], cfg, seed=5), network.state_dict()))
        (first, state_a), (second, state_b) = runs
        assert first.history == second.history
        assert all(state_a[k].tobytes() == state_b[k].tobytes() for k in state_a)

    def test_non_finite_loss(self, toy_graph, rng):
        samples = separable_samples(rng, 12, 8, 6)
        samples[0].inputs = np.full((8, 6), np.nan)
        cfg = TrainConfig(batch_size=64, max_epochs=2, patience=1, seeds=(1,))
        with pytest.raises(NonFiniteLossError) as info:
            train(toy_network(toy_graph), samples[:8], samples[8:], cfg, seed=1)
        assert info.value.epoch == 1

    @pytest.mark.slow
    @pytest.mark.parametrize("name", PRESETS)
    def test_fits_separable_windows(self, name, toy_graph, rng):
        samples = separable_samples(rng, 64, 8, 6, margin=0.8)
        cfg = TrainConfig(batch_size=32, max_epochs=80, patience=79, learning_rate=1e-2, seeds=(1,))
        network = toy_network(toy_graph, name=name, seed=0)
        train(network, samples, samples, cfg, seed=0)
        x, y = stack_samples(samples)
        assert evaluate(network, x, y).accuracy > 0.95

    @pytest.mark.slow
    @pytest.mark.parametrize("name", PRESETS)
    def test_first_epoch_lowers_loss(self, name, toy_graph, rng):
        samples = separable_samples(rng, 32, 8, 6)
        x, y = stack_samples(samples)
        network = toy_network(toy_graph, name=name)
        before = evaluate(network, x, y).loss
        cfg = TrainConfig(batch_size=8, max_epochs=1, patience=0, learning_rate=1e-2, seeds=(1,))
        train(network, samples, samples, cfg, seed=0)
        assert evaluate(network, x, y).loss < before


# =============================================================================
# Experiment runner
# =============================================================================

@pytest.fixture(scope="module")
def small_dataset(mock_tables):
    return dataprep.prepare_dataset(mock_tables, PanelMode.SINGLE, LabelScheme.BINARY01, SPLIT_65_15_20,
                                    window=8, market="SP500", data_hash="feedface")


class TestExperiments:
    @staticmethod
    def cfg(seeds):
        return TrainConfig(batch_size=32, max_epochs=2, patience=1, seeds=seeds)

    def test_one_seed_mean_equals_best(self, small_dataset, tmp_path):
        result = run_experiments(small_dataset, ["GCN_CNN"], self.cfg((1,)), str(tmp_path), kernel=2)
        mean, best = result.aggregate("GCN_CNN")
        np.testing.assert_array_equal(mean, best)
        assert np.all((0.0 <= mean) & (mean <= 1.0))
        for name in ("runs.csv", "results.csv"):
            assert os.path.exists(tmp_path / name)
        job = result.jobs[0]
        assert os.path.exists(job.weights_path) and os.path.exists(job.predictions_path)
        predictions = report.read_predictions(job.predictions_path)
        assert len(predictions.dates) == small_dataset.split[2]

    def test_best_is_elementwise_max(self, small_dataset, tmp_path):
        result = run_experiments(small_dataset, ["CNN_2D"], self.cfg((1, 2)), str(tmp_path), kernel=2)
        runs = np.vstack([job.f_measures for job in result.jobs])
        _, best = result.aggregate("CNN_2D")
        np.testing.assert_array_equal(best, runs.max(axis=0))

    def test_failed_job_is_recorded(self, small_dataset, tmp_path, monkeypatch):
        original = ExperimentRunner.run_job

        def flaky(self, name, pooling, seed):
            if seed == 2:
                raise RuntimeError("boom")
            return original(self, name, pooling, seed)

        monkeypatch.setattr(ExperimentRunner, "run_job", flaky)
        result = run_experiments(small_dataset, ["GCN_CNN"], self.cfg((1, 2)), str(tmp_path), kernel=2)
        failed = [job for job in result.jobs if job.f_measures is None]
        assert [(job.seed, job.error) for job in failed] == [(2, "RuntimeError: boom")]
        with open(tmp_path / "experiment_errors.log", encoding="utf-8") as f:
            assert "GCN_CNN[mean] seed 2" in f.read()
        reloaded = report.read_runs(str(tmp_path / "runs.csv"))
        assert reloaded.jobs[1].f_measures is None

    def test_parallel_matches_serial(self, small_dataset, tmp_path):
        serial = run_experiments(small_dataset, ["GCN_CNN"], self.cfg((1, 2)), str(tmp_path / "a"), kernel=2)
        parallel = run_experiments(small_dataset, ["GCN_CNN"], self.cfg((1, 2)), str(tmp_path / "b"),
                                   kernel=2, workers=2)
        for a, b in zip(serial.jobs, parallel.jobs):
            assert a.key == b.key
            assert a.f_measures.tobytes() == b.f_measures.tobytes()
        with open(tmp_path / "a" / "results.csv", "rb") as fa, open(tmp_path / "b" / "results.csv", "rb") as fb:
            assert fa.read() == fb.read()

    def test_each_pooling_gets_its_own_files(self, small_dataset, tmp_path):
        poolings = (GraphPoolKind.MEAN, GraphPoolKind.MAX)
        result = run_experiments(small_dataset, ["GCN_CNN"], self.cfg((1,)), str(tmp_path), kernel=2,
                                 pooling=poolings)
        assert [job.key for job in result.jobs] == [("GCN_CNN", "mean", 1), ("GCN_CNN", "max", 1)]
        assert [os.path.basename(job.weights_path) for job in result.jobs] == [
            "GCN_CNN_mean_seed1.gcnp", "GCN_CNN_max_seed1.gcnp"]
        assert all(job.val_score is not None for job in result.jobs)
        reloaded = report.merge_runs([report.read_runs(str(tmp_path / "runs.csv"))])
        assert len(reloaded.jobs) == 2
        assert reloaded.selected_pooling("GCN_CNN") in ("mean", "max")

    def test_layout_without_graph_stage_runs_once(self, small_dataset, tmp_path):
        runner = ExperimentRunner(small_dataset, ["CNN_2D", "GAT"], self.cfg((1,)), str(tmp_path), kernel=2,
                                  pooling=tuple(GraphPoolKind))
        assert runner.jobs == [("CNN_2D", NO_POOLING, 1), ("GAT", "mean", 1), ("GAT", "max", 1), ("GAT", "fc", 1)]
        assert runner.job_paths("CNN_2D", NO_POOLING, 1)[0].endswith("CNN_2D_seed1.gcnp")

    def test_short_window_fails_before_any_job(self, small_dataset, tmp_path, monkeypatch):
        def never(self, *job):
            raise AssertionError("no job may start")

        monkeypatch.setattr(ExperimentRunner, "run_job", never)
        with pytest.raises(NetworkConfigError, match="window"):
            run_experiments(small_dataset, ["GCN", "GAT_CNN"], self.cfg((1,)), str(tmp_path), kernel=3)
        assert not os.path.exists(tmp_path / "runs.csv")
