import argparse
import glob
import logging
import os
import sys
from dataclasses import dataclass, field
from functools import cached_property
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from batch_processor import run_experiments
from config.config_loader import DEFAULT_PATH, ConfigLoader, config
from core.engine_interface import MarketSource
from core.errors import ConfigError, DataError, GraphCnnPredError, TrainingError
from core.types import (
    MARKETS,
    NO_POOLING,
    SPLIT_PRESETS,
    CeqParams,
    GraphPoolKind,
    HeadKind,
    LabelScheme,
    NetworkConfig,
    PanelMode,
    PredictionSeries,
    SplitSpec,
    TrainConfig,
    config_hash,
)
from engines import backtest, graphbuild, report
from engines.csv_source import CsvMarketSource
from engines.dataprep import PreparedDataset, prepare_dataset
from engines.mock_engines import MockMarketSource
from engines.model import PRESETS, Network
from engines.trainer import stack_samples

logger = logging.getLogger("GRAPHCNNPRED")

DATA_DIR_ENV = "GRAPHCNNPRED_DATA_DIR"
PREPARED_FILE = "prepared.gcnp"
EDGE_LIST_FILE = "graph_edges.tsv"


@dataclass
class RunConfig:
    data_dir: str
    out_dir: str
    source: str = "csv"
    file_pattern: str = "Processed_{name}.csv"
    mode: PanelMode = PanelMode.COMBINED
    market: Optional[str] = None
    split: SplitSpec = SPLIT_PRESETS["65-15-20"]
    labeling: LabelScheme = LabelScheme.BINARY01
    head: HeadKind = HeadKind.BINARY5
    window: int = 60
    horizon: int = 1
    tau: float = 0.7
    signed_threshold: bool = False
    presets: Tuple[str, ...] = ("GAT_CNN",)
    poolings: Tuple[GraphPoolKind, ...] = (GraphPoolKind.MEAN,)
    kernel: Optional[int] = None
    hidden_units: int = 16
    train: TrainConfig = field(default_factory=TrainConfig)
    workers: int = 1
    gamma: float = 1.0
    mock_days: int = 400
    mock_seed: int = 7

    @property
    def prepared_path(self) -> str:
        return os.path.join(self.out_dir, PREPARED_FILE)

    @cached_property
    def data_hash(self) -> str:
        """Hash of every setting that shapes the prepared file, plus the bytes of the market files."""
        payload = {
            "source": self.source,
            "mode": self.mode.value,
            "market": self.market,
            "split": [self.split.train, self.split.validation, self.split.test],
            "labeling": self.labeling.value,
            "window": self.window,
            "horizon": self.horizon,
            "tau": self.tau,
            "signed_threshold": self.signed_threshold,
        }
        if self.source == "mock":
            payload["mock"] = [self.mock_days, self.mock_seed]
        else:
            payload["files"] = CsvMarketSource(self.data_dir, self.file_pattern).fingerprint(MARKETS)
        return config_hash(payload)


def parse_seeds(text: str) -> Tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be a comma-separated list of integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _choice(value, enum_cls, what: str):
    try:
        return enum_cls(value)
    except ValueError:
        raise ConfigError(f"unknown {what} {value!r}; choose from {[e.value for e in enum_cls]}") from None


def parse_poolings(value) -> Tuple[GraphPoolKind, ...]:
    """A pooling kind, a comma-separated string or YAML list of them, or 'all'."""
    items = value if isinstance(value, (list, tuple)) else str(value).split(",")
    names = [str(v).strip() for v in items if str(v).strip()]
    if names == ["all"]:
        return tuple(GraphPoolKind)
    poolings = tuple(dict.fromkeys(_choice(n, GraphPoolKind, "pooling") for n in names))
    if not poolings:
        raise ConfigError("no graph pooling selected")
    return poolings


def build_run_config(args: argparse.Namespace) -> RunConfig:
    """YAML settings, overridden by command-line flags, then validated."""
    settings = config if os.path.abspath(args.config) == DEFAULT_PATH else ConfigLoader(args.config)

    def pick(flag: str, key: str, default=None):
        value = getattr(args, flag, None)
        return value if value is not None else settings.get(key, default)

    labeling = _choice(str(pick("labeling", "data.labeling", "01")), LabelScheme, "labeling")
    head_value = pick("head", "model.head")
    head = _choice(head_value, HeadKind, "head") if head_value else (
        HeadKind.BINARY5 if labeling is LabelScheme.BINARY01 else HeadKind.TERNARY15)

    split_name = str(pick("split", "data.split", "65-15-20"))
    if split_name not in SPLIT_PRESETS:
        raise ConfigError(f"unknown split {split_name!r}; choose from {list(SPLIT_PRESETS)}")

    preset_value = str(pick("preset", "model.preset", "GAT_CNN"))
    presets = PRESETS if preset_value == "all" else tuple(p.strip() for p in preset_value.split(",") if p.strip())

    train = TrainConfig(
        batch_size=int(settings.get("train.batch_size", 32)),
        micro_batch=int(settings.get("train.micro_batch", 8)),
        max_epochs=int(pick("max_epochs", "train.max_epochs", 200)),
        patience=int(pick("patience", "train.patience", 20)),
        learning_rate=float(settings.get("train.learning_rate", 1e-3)),
        seeds=tuple(pick("seeds", "train.seeds", (1, 2, 3, 4, 5))),
        split=SPLIT_PRESETS[split_name],
        head=head,
        preset=presets[0] if presets else "",
    )
    kernel = pick("kernel", "model.kernel")
    run = RunConfig(
        data_dir=args.data_dir or os.environ.get(DATA_DIR_ENV) or settings.get("paths.data_dir", "data"),
        out_dir=pick("out", "paths.output_dir", "output"),
        source=str(pick("source", "engines.source", "csv")),
        file_pattern=settings.get("data.file_pattern", "Processed_{name}.csv"),
        mode=_choice(pick("mode", "data.mode", "combined"), PanelMode, "mode"),
        market=pick("market", "data.market"),
        split=SPLIT_PRESETS[split_name],
        labeling=labeling,
        head=head,
        window=int(pick("window", "data.window", 60)),
        horizon=int(settings.get("data.horizon", 1)),
        tau=float(pick("tau", "graph.tau", 0.7)),
        signed_threshold=bool(settings.get("graph.signed_threshold", False)),
        presets=presets,
        poolings=parse_poolings(pick("pooling", "model.pooling", "mean")),
        kernel=int(kernel) if kernel is not None else None,
        hidden_units=int(settings.get("model.hidden_units", 16)),
        train=train,
        workers=int(pick("workers", "train.workers", 1)),
        gamma=float(settings.get("backtest.gamma", 1.0)),
        mock_days=int(settings.get("mock.days", 400)),
        mock_seed=int(settings.get("mock.seed", 7)),
    )
    validate_run_config(run)
    return run


def validate_run_config(run: RunConfig) -> None:
    if run.head.scheme is not run.labeling:
        raise ConfigError(
            f"head {run.head.value} needs labeling {run.head.scheme.value}, got {run.labeling.value}"
        )
    if not 0.0 < run.tau <= 1.0:
        raise ConfigError(f"graph threshold tau must be in (0, 1], got {run.tau}")
    if run.window < 1:
        raise ConfigError(f"window must be positive, got {run.window}")
    if not 1 <= run.horizon <= 10:
        raise ConfigError(f"horizon must be in [1, 10], got {run.horizon}")
    if run.mode is PanelMode.SINGLE and run.market not in MARKETS:
        raise ConfigError(f"single-market mode needs data.market in {list(MARKETS)}, got {run.market!r}")
    if not run.presets:
        raise ConfigError("no model preset selected")
    unknown = [p for p in run.presets if p not in PRESETS]
    if unknown:
        raise ConfigError(f"unknown preset(s) {unknown}; choose from {list(PRESETS)} or 'all'")
    if run.kernel is not None and run.kernel < 1:
        raise ConfigError(f"kernel must be positive, got {run.kernel}")
    if run.gamma < 0:
        raise ConfigError(f"risk aversion gamma must be non-negative, got {run.gamma}")
    if run.source not in ("csv", "mock"):
        raise ConfigError(f"unknown market source {run.source!r}; choose from ['csv', 'mock']")


def get_source(run: RunConfig) -> MarketSource:
    """
    Factory method to get the configured market source.
    """
    if run.source == "csv":
        return CsvMarketSource(run.data_dir, run.file_pattern)
    elif run.source == "mock":
        return MockMarketSource(n_days=run.mock_days, seed=run.mock_seed)
    raise ConfigError(f"unknown market source {run.source!r}")


def load_prepared(run: RunConfig, path: Optional[str]) -> PreparedDataset:
    path = path or run.prepared_path
    if not os.path.isfile(path):
        raise DataError(f"prepared dataset {path} not found; run 'prepare' first")
    return PreparedDataset.load(path, expected_hash=run.data_hash)


# ──────────────────────────────────────────────
# Subcommands
# ──────────────────────────────────────────────

def cmd_prepare(run: RunConfig, args: argparse.Namespace) -> int:
    logger.info(f"Step 1: Loading market tables ({run.source})")
    tables = get_source(run).load_tables(MARKETS)

    logger.info("Step 2: Preparing dataset")
    dataset = prepare_dataset(
        tables,
        mode=run.mode,
        scheme=run.labeling,
        split=run.split,
        window=run.window,
        horizon=run.horizon,
        tau=run.tau,
        signed_threshold=run.signed_threshold,
        market=run.market,
        data_hash=run.data_hash,
    )

    logger.info("Step 3: Writing prepared dataset and graph")
    dataset.save(run.prepared_path)
    graphbuild.export_edge_list(dataset.graph, os.path.join(run.out_dir, EDGE_LIST_FILE))
    stats = graphbuild.graph_stats(dataset.graph)
    print(f"Prepared {run.prepared_path}: {len(dataset.panel)} dates, {dataset.panel.n_features} features, "
          f"split {dataset.split}, graph {stats.n_edges} edges / {stats.isolated} isolated")
    return 0


def cmd_train(run: RunConfig, args: argparse.Namespace) -> int:
    logger.info("Step 1: Loading prepared dataset")
    dataset = load_prepared(run, args.prepared)

    logger.info(f"Step 2: Training {list(run.presets)} with seeds {list(run.train.seeds)}")
    result = run_experiments(
        dataset, run.presets, run.train, run.out_dir,
        pooling=run.poolings, kernel=run.kernel, hidden_units=run.hidden_units, workers=run.workers,
    )

    logger.info("Step 3: Rendering F-measure tables")
    print(report.render_f_tables(result))
    if all(job.f_measures is None for job in result.jobs):
        raise TrainingError("every training job failed; see experiment_errors.log")
    return 0


def _predictions_from_weights(path: str, dataset: PreparedDataset, test_inputs, test_dates) -> Tuple[str, PredictionSeries]:
    from engines import container

    _, meta = container.load(path)
    if "config" not in meta:
        raise DataError(f"{path} holds no network config")
    config = NetworkConfig.from_dict(meta["config"])
    network = Network(config, dataset.graph)
    network.load(path)
    pooling = meta.get("pooling", NO_POOLING)
    name = config.name if pooling == NO_POOLING else f"{config.name}[{pooling}]"
    if "seed" in meta:
        name = f"{name} seed {meta['seed']}"
    return name, network.predict(test_inputs, test_dates)


def cmd_backtest(run: RunConfig, args: argparse.Namespace) -> int:
    logger.info("Step 1: Loading test segment")
    dataset = load_prepared(run, args.prepared)
    _, _, test = dataset.segments()
    dates = [s.anchor_date for s in test]
    returns = np.stack([s.returns for s in test])

    logger.info("Step 2: Collecting predictions")
    predictions: List[Tuple[str, PredictionSeries]] = []
    for path in args.predictions or []:
        name = os.path.splitext(os.path.basename(path))[0]
        predictions.append((name, report.read_predictions(path)))
    if args.weights:
        test_inputs, _ = stack_samples(test)
        for path in args.weights:
            predictions.append(_predictions_from_weights(path, dataset, test_inputs, dates))
    if not predictions:
        logger.info("No predictions given; reporting the always-long baseline only")

    logger.info("Step 3: Scoring strategies")
    result = backtest.run_backtest(dates, returns, predictions, CeqParams(run.gamma))
    frame = report.backtest_frame(result)
    report.write_backtest(result, os.path.join(run.out_dir, "backtest.csv"))
    text = report.render_backtest(frame, gamma=run.gamma)
    with open(os.path.join(run.out_dir, "backtest.txt"), "w", encoding="utf-8") as f:
        f.write(text)
    print(text)
    return 0


def _find(dirs: Sequence[str], name: str) -> List[str]:
    found = []
    for directory in dirs:
        found += glob.glob(os.path.join(directory, "**", name), recursive=True)
    return sorted(set(found))


def cmd_report(run: RunConfig, args: argparse.Namespace) -> int:
    dirs = args.results or [run.out_dir]
    runs = _find(dirs, "runs.csv")
    backtests = _find(dirs, "backtest.csv")
    if not runs and not backtests:
        raise DataError(f"no runs.csv or backtest.csv under {dirs}")
    os.makedirs(run.out_dir, exist_ok=True)

    if runs:
        logger.info(f"Step 1: Merging {len(runs)} run file(s)")
        merged = report.merge_runs([report.read_runs(p) for p in runs])
        report.write_results(merged, os.path.join(run.out_dir, "report_results.csv"))
        text = report.render_f_tables(merged)
        with open(os.path.join(run.out_dir, "report_f_tables.txt"), "w", encoding="utf-8") as f:
            f.write(text)
        print(text)

    if backtests:
        logger.info(f"Step 2: Merging {len(backtests)} backtest file(s)")
        frame = pd.concat([report.read_backtest(p) for p in backtests], ignore_index=True)
        frame = frame.drop_duplicates(subset=["strategy", "metric"], keep="first")
        first = frame["strategy"] == backtest.ALWAYS_LONG
        frame = pd.concat([frame[first], frame[~first]], ignore_index=True)
        frame.to_csv(os.path.join(run.out_dir, "report_backtest.csv"), index=False, float_format=report.FLOAT_FORMAT)
        text = report.render_backtest(frame)
        with open(os.path.join(run.out_dir, "report_backtest.txt"), "w", encoding="utf-8") as f:
            f.write(text)
        print(text)
    return 0


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "backtest": cmd_backtest, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=DEFAULT_PATH, help="YAML settings file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--data-dir", dest="data_dir", help=f"market CSV directory (default ${DATA_DIR_ENV})")
    common.add_argument("--source", choices=["csv", "mock"], help="market source")
    common.add_argument("--mode", choices=[m.value for m in PanelMode])
    common.add_argument("--market", choices=list(MARKETS), help="market for single mode")
    common.add_argument("--split", choices=list(SPLIT_PRESETS))
    common.add_argument("--labeling", choices=[s.value for s in LabelScheme])
    common.add_argument("--head", choices=[h.value for h in HeadKind])
    common.add_argument("--window", type=int)
    common.add_argument("--tau", type=float, help="correlation threshold in (0, 1]")
    common.add_argument("--preset", help="preset name, comma-separated list, or 'all'")
    common.add_argument("--pooling", help="graph pooling: mean, max, fc, a comma-separated list, or 'all'")
    common.add_argument("--kernel", type=int, help="override every convolution kernel size")
    common.add_argument("--seeds", type=parse_seeds, help="comma-separated seeds, e.g. 1,2,3")
    common.add_argument("--max-epochs", dest="max_epochs", type=int)
    common.add_argument("--patience", type=int)
    common.add_argument("--workers", type=int, help="parallel training jobs")
    common.add_argument("--prepared", help=f"prepared dataset (default <out>/{PREPARED_FILE})")
    common.add_argument("--verbose", "-v", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="graphcnnpred", description="Graph-based CNN market direction prediction")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="ingest CSVs, label, normalize, build the feature graph")
    sub.add_parser("train", parents=[common], help="train presets over seeds and write result tables")
    bt = sub.add_parser("backtest", parents=[common], help="score predictions with Sharpe and CEQ")
    bt.add_argument("--predictions", nargs="+", help="prediction CSV file(s)")
    bt.add_argument("--weights", nargs="+", help="weight file(s) to run on the test segment")
    rp = sub.add_parser("report", parents=[common], help="merge result directories into consolidated tables")
    rp.add_argument("results", nargs="*", help="result directories (default: --out)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    try:
        run = build_run_config(args)
        os.makedirs(run.out_dir, exist_ok=True)
        logger.info(f"Running '{args.command}' (data hash {run.data_hash}, output {run.out_dir})")
        return COMMANDS[args.command](run, args)
    except GraphCnnPredError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
