"""
End-to-end runs of the command-line entry point on synthetic market files.
"""
import logging
import os

import pandas as pd
import pytest

from config.config_loader import ConfigLoader
from core.errors import ConfigError
from core.types import MARKETS
from engines.backtest import ALWAYS_LONG, COMBINATION
from engines.csv_source import FILE_STEMS
from engines.dataprep import PreparedDataset
from engines.mock_engines import MockMarketSource
from main import main

SMALL = ["--window", "8", "--mode", "single", "--market", "SP500", "--labeling", "01"]


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture
def prepared_dir(market_csv_dir, tmp_path):
    out = tmp_path / "out"
    assert run("prepare", "--data-dir", market_csv_dir, "--out", out, *SMALL) == 0
    return out


class TestPrepare:
    def test_writes_dataset_and_edge_list(self, prepared_dir):
        assert (prepared_dir / "prepared.gcnp").is_file()
        with open(prepared_dir / "graph_edges.tsv", encoding="utf-8") as f:
            assert f.readline().startswith("# nodes 82 ")

    def test_rerun_is_byte_identical(self, market_csv_dir, prepared_dir, tmp_path):
        again = tmp_path / "again"
        assert run("prepare", "--data-dir", market_csv_dir, "--out", again, *SMALL) == 0
        assert (again / "prepared.gcnp").read_bytes() == (prepared_dir / "prepared.gcnp").read_bytes()

    def test_mock_source(self, tmp_path):
        assert run("prepare", "--source", "mock", "--out", tmp_path, "--window", "20") == 0
        assert (tmp_path / "prepared.gcnp").is_file()

    def test_missing_market_file(self, market_csv_dir, tmp_path, caplog):
        os.remove(market_csv_dir / f"Processed_{FILE_STEMS['NYSE']}.csv")
        with caplog.at_level(logging.ERROR):
            code = run("prepare", "--data-dir", market_csv_dir, "--out", tmp_path / "out", *SMALL)
        assert code == 3
        assert "NYSE" in caplog.text

    def test_head_must_match_labeling(self, market_csv_dir, tmp_path):
        code = run("prepare", "--data-dir", market_csv_dir, "--out", tmp_path,
                   *SMALL, "--head", "ternary15")
        assert code == 2

    def test_tau_out_of_range(self, market_csv_dir, tmp_path):
        assert run("prepare", "--data-dir", market_csv_dir, "--out", tmp_path, *SMALL, "--tau", "1.5") == 2


class TestTrainAndBacktest:
    def test_stale_prepared_file(self, market_csv_dir, prepared_dir, caplog):
        with caplog.at_level(logging.ERROR):
            code = run("train", "--data-dir", market_csv_dir, "--out", prepared_dir,
                       "--window", "10", "--mode", "single", "--market", "SP500", "--labeling", "01")
        assert code == 3
        assert "StaleDataError" in caplog.text

    def test_train_without_prepare(self, market_csv_dir, tmp_path):
        assert run("train", "--data-dir", market_csv_dir, "--out", tmp_path, *SMALL) == 3

    def test_patience_must_be_below_max_epochs(self, market_csv_dir, prepared_dir):
        code = run("train", "--data-dir", market_csv_dir, "--out", prepared_dir, *SMALL,
                   "--max-epochs", "2", "--patience", "2")
        assert code == 2

    def test_rewritten_market_file_is_stale(self, market_csv_dir, prepared_dir, caplog):
        MockMarketSource(n_days=160, seed=4).write_csvs(str(market_csv_dir))
        with caplog.at_level(logging.ERROR):
            code = run("train", "--data-dir", market_csv_dir, "--out", prepared_dir, *SMALL)
        assert code == 3
        assert "StaleDataError" in caplog.text

    def test_window_too_short_for_kernel(self, market_csv_dir, prepared_dir, caplog):
        with caplog.at_level(logging.ERROR):
            code = run("train", "--data-dir", market_csv_dir, "--out", prepared_dir, *SMALL,
                       "--preset", "GAT_CNN", "--kernel", "3", "--seeds", "1,2")
        assert code == 2
        assert "window too short" in caplog.text
        assert not (prepared_dir / "runs.csv").exists()
        assert not (prepared_dir / "weights").exists()

    def test_unknown_pooling(self, market_csv_dir, prepared_dir):
        assert run("train", "--data-dir", market_csv_dir, "--out", prepared_dir, *SMALL, "--pooling", "sum") == 2

    def test_always_long_only(self, market_csv_dir, prepared_dir):
        assert run("backtest", "--data-dir", market_csv_dir, "--out", prepared_dir, *SMALL) == 0
        frame = pd.read_csv(prepared_dir / "backtest.csv")
        assert set(frame["strategy"]) == {ALWAYS_LONG}
        assert list(frame.columns) == ["strategy", "metric", *MARKETS, COMBINATION]

    @pytest.mark.slow
    def test_full_pipeline(self, market_csv_dir, prepared_dir, tmp_path):
        common = ["--data-dir", market_csv_dir, "--out", prepared_dir, *SMALL]
        assert run("train", *common, "--preset", "GAT_CNN", "--kernel", "2", "--seeds", "1",
                   "--max-epochs", "2", "--patience", "1") == 0
        runs = pd.read_csv(prepared_dir / "runs.csv")
        assert runs[["preset", "pooling", "seed"]].values.tolist() == [["GAT_CNN", "mean", 1]]
        assert runs["error"].isna().all()
        predictions = prepared_dir / "predictions" / "GAT_CNN_mean_seed1.csv"
        weights = prepared_dir / "weights" / "GAT_CNN_mean_seed1.gcnp"
        assert predictions.is_file() and weights.is_file()

        assert run("backtest", *common, "--predictions", predictions, "--weights", weights) == 0
        frame = pd.read_csv(prepared_dir / "backtest.csv")
        by_file, by_weights = "GAT_CNN_mean_seed1", "GAT_CNN[mean] seed 1"
        assert list(dict.fromkeys(frame["strategy"])) == [ALWAYS_LONG, by_file, by_weights]
        from_file = frame[frame["strategy"] == by_file].drop(columns="strategy").reset_index(drop=True)
        from_weights = frame[frame["strategy"] == by_weights].drop(columns="strategy").reset_index(drop=True)
        pd.testing.assert_frame_equal(from_file, from_weights)

        merged = tmp_path / "merged"
        assert run("report", "--out", merged, prepared_dir) == 0
        assert (merged / "report_results.csv").is_file()
        assert "Mean F-measure" in (merged / "report_f_tables.txt").read_text(encoding="utf-8")
        assert (merged / "report_backtest.csv").is_file()

    @pytest.mark.slow
    def test_two_poolings_survive_report(self, market_csv_dir, prepared_dir, tmp_path):
        common = ["--data-dir", market_csv_dir, "--out", prepared_dir, *SMALL, "--preset", "GCN",
                  "--seeds", "1", "--max-epochs", "2", "--patience", "1"]
        assert run("train", *common, "--pooling", "mean,max") == 0
        assert (prepared_dir / "weights" / "GCN_mean_seed1.gcnp").is_file()
        assert (prepared_dir / "weights" / "GCN_max_seed1.gcnp").is_file()
        merged = tmp_path / "merged"
        assert run("report", "--out", merged, prepared_dir) == 0
        results = pd.read_csv(merged / "report_results.csv")
        assert sorted(results["pooling"]) == ["max", "mean"]
        assert results["selected"].sum() == 1
        assert "by pooling" in (merged / "report_f_tables.txt").read_text(encoding="utf-8")

    @pytest.mark.slow
    def test_prepare_and_train_rerun_is_byte_identical(self, market_csv_dir, tmp_path):
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            common = ["--data-dir", market_csv_dir, "--out", out, *SMALL]
            assert run("prepare", *common) == 0
            assert run("train", *common, "--preset", "GCN_CNN", "--kernel", "2", "--seeds", "1",
                       "--max-epochs", "2", "--patience", "1") == 0
            outputs.append(out)
        a, b = outputs
        for relative in ("prepared.gcnp", "weights/GCN_CNN_mean_seed1.gcnp", "runs.csv", "results.csv"):
            assert (a / relative).read_bytes() == (b / relative).read_bytes(), relative

    def test_report_without_results(self, tmp_path):
        assert run("report", "--out", tmp_path / "merged", tmp_path / "nothing") == 3


class TestConfig:
    def test_dotted_get(self, tmp_path):
        path = tmp_path / "settings.yaml"
        path.write_text("data:\n  window: 12\ngraph: {tau: 0.5}\n", encoding="utf-8")
        loader = ConfigLoader(str(path))
        assert loader.get("data.window") == 12
        assert loader.get("graph.tau") == 0.5
        assert loader.get("data.missing", "x") == "x"
        assert loader.get("data.window.deeper") is None

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            ConfigLoader(str(tmp_path / "absent.yaml"))

    def test_settings_file_drives_prepare(self, market_csv_dir, tmp_path):
        path = tmp_path / "settings.yaml"
        path.write_text(
            "data:\n  mode: single\n  market: DJI\n  labeling: '012'\n  window: 10\ngraph:\n  tau: 0.9\n",
            encoding="utf-8",
        )
        out = tmp_path / "out"
        assert run("prepare", "--config", path, "--data-dir", market_csv_dir, "--out", out) == 0
        dataset = PreparedDataset.load(str(out / "prepared.gcnp"))
        assert dataset.window == 10 and dataset.tau == 0.9
        assert dataset.panel.market == "DJI"
        assert dataset.labels.thresholds is not None

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "settings.yaml"
        path.write_text("data: [unclosed\n", encoding="utf-8")
        assert run("prepare", "--config", path, "--out", tmp_path / "out") == 2
