"""
CSV formats and monospace tables for experiment and backtest results.

Files:
    runs.csv         one row per (preset, pooling, seed): test macro-F per index, best validation score or the job error
    results.csv      one row per (preset, pooling): mean and best macro-F per index, selected variant flagged
    predictions CSV  date, <MARKET>_class per index, then <MARKET>_p (binary) or <MARKET>_p0..p2 (ternary)
    backtest.csv     one row per (strategy, metric): index columns plus Combination
"""
import logging
import os
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from core.errors import BacktestAlignmentError, ParseError, SchemaError
from core.types import MARKETS, NO_POOLING, BacktestReport, ExperimentResult, HeadKind, JobResult, PredictionSeries
from engines.backtest import COMBINATION
from engines.model import PRESET_FAMILIES, PRESETS, discretize

logger = logging.getLogger(__name__)

ABSENT = "n/a"
FLOAT_FORMAT = "%.10g"
DISPLAY_NAMES = {"SP500": "S&P 500", "DJI": "DJI", "NASDAQ": "NASDAQ", "NYSE": "NYSE", "RUSSELL": "RUSSELL"}
BACKTEST_METRICS = ("sharpe", "annual_sharpe", "ceq")
RUNS_COLUMNS = ["preset", "pooling", "seed", *MARKETS, "val_score", "error"]


def _ensure_dir(path: str) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)


def _read_csv(path: str, required: Sequence[str]) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, keep_default_na=True, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ParseError(str(e), path=path) from e
    missing = [c for c in required if c not in frame.columns]
    if missing:
        raise SchemaError(f"{path}: missing column(s) {missing}")
    return frame


def preset_order(presets: Sequence[str]) -> List[str]:
    """Family order of the result tables, unknown presets last in first-seen order."""
    known = [p for p in PRESETS if p in presets]
    return known + [p for p in dict.fromkeys(presets) if p not in PRESET_FAMILIES]


def row_label(preset: str) -> str:
    family = PRESET_FAMILIES.get(preset)
    return f"{family} ({preset})" if family and family != preset else preset


# ──────────────────────────────────────────────
# Experiment results
# ──────────────────────────────────────────────

def runs_frame(result: ExperimentResult) -> pd.DataFrame:
    rows = []
    for job in result.jobs:
        row = {"preset": job.preset, "pooling": job.pooling, "seed": job.seed}
        values = job.f_measures if job.f_measures is not None else [np.nan] * len(MARKETS)
        row.update({m: float(v) for m, v in zip(MARKETS, values)})
        row["val_score"] = np.nan if job.val_score is None else float(job.val_score)
        row["error"] = job.error or ""
        rows.append(row)
    return pd.DataFrame(rows, columns=RUNS_COLUMNS)


def write_runs(result: ExperimentResult, path: str) -> str:
    _ensure_dir(path)
    runs_frame(result).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Per-seed results saved: {path}")
    return path


def read_runs(path: str) -> ExperimentResult:
    """Reads runs.csv; the pooling and val_score columns are optional."""
    frame = _read_csv(path, ["preset", "seed", *MARKETS])
    jobs = []
    for record in frame.to_dict("records"):
        values = np.array([record[m] for m in MARKETS], dtype=np.float64)
        error = record.get("error")
        error = error if isinstance(error, str) and error else None
        failed = error is not None or np.isnan(values).any()
        pooling = record.get("pooling")
        val_score = record.get("val_score")
        jobs.append(JobResult(
            preset=str(record["preset"]),
            seed=int(record["seed"]),
            pooling=pooling if isinstance(pooling, str) and pooling else NO_POOLING,
            f_measures=None if failed else values,
            val_score=None if val_score is None or pd.isna(val_score) else float(val_score),
            error=error,
        ))
    return ExperimentResult(jobs=jobs)


def merge_runs(results: Sequence[ExperimentResult]) -> ExperimentResult:
    """Union of runs; a later (preset, pooling, seed) replaces an earlier one."""
    merged: Dict[tuple, JobResult] = {}
    for result in results:
        for job in result.jobs:
            merged[job.key] = job
    return ExperimentResult(jobs=list(merged.values()))


def _f_frame(labels: List[str], rows: List) -> pd.DataFrame:
    return pd.DataFrame(np.array(rows, dtype=np.float64).reshape(len(labels), len(MARKETS)),
                        index=pd.Index(labels, name="strategy"), columns=list(MARKETS))


def f_tables(result: ExperimentResult) -> Dict[str, pd.DataFrame]:
    """
    Mean and best test macro-F per preset row, each preset at its selected
    pooling; absent cells are NaN.
    """
    tables = {"mean": [], "best": []}
    labels = []
    for preset in preset_order(result.presets()):
        mean, best = result.aggregate(preset)
        labels.append(row_label(preset))
        tables["mean"].append(mean if mean is not None else [np.nan] * len(MARKETS))
        tables["best"].append(best if best is not None else [np.nan] * len(MARKETS))
    return {kind: _f_frame(labels, rows) for kind, rows in tables.items()}


def pooling_table(result: ExperimentResult) -> Optional[pd.DataFrame]:
    """Mean test macro-F of every pooling variant of presets trained with more than one, else None."""
    labels, rows = [], []
    for preset in preset_order(result.presets()):
        poolings = result.poolings(preset)
        if len(poolings) < 2:
            continue
        selected = result.selected_pooling(preset)
        for pooling in poolings:
            mean, _ = result.aggregate(preset, pooling)
            labels.append(f"{preset} [{pooling}]" + (" *" if pooling == selected else ""))
            rows.append(mean if mean is not None else [np.nan] * len(MARKETS))
    return _f_frame(labels, rows) if labels else None


def write_results(result: ExperimentResult, path: str) -> str:
    """
    One row per (preset, pooling) variant with mean_<MARKET> and
    best_<MARKET> columns; `selected` marks the variant the F tables report.
    """
    rows = []
    for preset in preset_order(result.presets()):
        selected = result.selected_pooling(preset)
        for pooling in result.poolings(preset):
            mean, best = result.aggregate(preset, pooling)
            variant = [j for j in result.jobs if j.preset == preset and j.pooling == pooling]
            scores = [j.val_score for j in variant if j.f_measures is not None and j.val_score is not None]
            row = {
                "preset": preset,
                "family": PRESET_FAMILIES.get(preset, preset),
                "pooling": pooling,
                "selected": pooling == selected,
                "seeds": len(variant),
                "succeeded": sum(1 for j in variant if j.f_measures is not None),
                "mean_val_score": float(np.mean(scores)) if scores else np.nan,
            }
            for j, m in enumerate(MARKETS):
                row[f"mean_{m}"] = mean[j] if mean is not None else np.nan
                row[f"best_{m}"] = best[j] if best is not None else np.nan
            rows.append(row)
    _ensure_dir(path)
    pd.DataFrame(rows).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Results table saved: {path}")
    return path


def _render(frame: pd.DataFrame, title: str, digits: int) -> str:
    shown = frame.rename(columns=DISPLAY_NAMES).apply(
        lambda col: col.map(lambda v: ABSENT if pd.isna(v) else f"{v:.{digits}f}")
    )
    return f"{title}\n{shown.to_string()}\n"


def render_f_tables(result: ExperimentResult) -> str:
    tables = f_tables(result)
    parts = [
        _render(tables["mean"], "Mean F-measure", 4),
        _render(tables["best"], "Best F-measure", 4),
    ]
    by_pooling = pooling_table(result)
    if by_pooling is not None:
        parts.append(_render(by_pooling, "Mean F-measure by pooling (* selected on validation)", 4))
    return "\n".join(parts)



# ──────────────────────────────────────────────
# Predictions
# ──────────────────────────────────────────────

def write_predictions(series: PredictionSeries, path: str) -> str:
    frame = pd.DataFrame({"date": series.dates})
    for j, m in enumerate(MARKETS):
        frame[f"{m}_class"] = series.classes[:, j]
    for j, m in enumerate(MARKETS):
        if series.head is HeadKind.BINARY5:
            frame[f"{m}_p"] = series.outputs[:, j]
        else:
            for c in range(3):
                frame[f"{m}_p{c}"] = series.outputs[:, j, c]
    _ensure_dir(path)
    frame.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Predictions saved: {path}")
    return path


def read_predictions(path: str) -> PredictionSeries:
    """
    Reads a predictions CSV. Probability columns are optional; without them
    the head is inferred from the class range.
    """
    frame = _read_csv(path, ["date", *[f"{m}_class" for m in MARKETS]])
    dates = [str(d) for d in frame["date"]]
    if len(set(dates)) != len(dates):
        raise BacktestAlignmentError(f"{path}: duplicate prediction dates")
    classes = frame[[f"{m}_class" for m in MARKETS]].to_numpy()
    if np.isnan(classes.astype(np.float64)).any():
        raise ParseError("missing class value", path=path)
    classes = classes.astype(np.int64)

    if all(f"{m}_p2" in frame.columns for m in MARKETS):
        head = HeadKind.TERNARY15
        outputs = np.stack([frame[[f"{m}_p{c}" for c in range(3)]].to_numpy(np.float64) for m in MARKETS], axis=1)
    elif all(f"{m}_p" in frame.columns for m in MARKETS):
        head = HeadKind.BINARY5
        outputs = frame[[f"{m}_p" for m in MARKETS]].to_numpy(np.float64)
    else:
        head = HeadKind.TERNARY15 if classes.size and classes.max() > 1 else HeadKind.BINARY5
        outputs = None
    if outputs is not None and not np.array_equal(discretize(outputs, head), classes):
        logger.warning(f"{path}: class columns disagree with probability columns, using the class columns")
    if outputs is None:
        outputs = classes.astype(np.float64)
    return PredictionSeries(dates=dates, outputs=outputs, classes=classes, head=head)


# ──────────────────────────────────────────────
# Backtest
# ──────────────────────────────────────────────

def backtest_frame(report: BacktestReport) -> pd.DataFrame:
    columns = [*MARKETS, COMBINATION]
    rows = []
    for row in report.rows:
        for metric in BACKTEST_METRICS:
            entry = {"strategy": row.strategy, "metric": metric}
            for key in columns:
                cell = row.cells.get(key)
                value: Optional[float] = getattr(cell, metric) if cell is not None else None
                entry[key] = np.nan if value is None else value
            rows.append(entry)
    return pd.DataFrame(rows, columns=["strategy", "metric", *columns])


def write_backtest(report: BacktestReport, path: str) -> str:
    _ensure_dir(path)
    backtest_frame(report).to_csv(path, index=False, float_format=FLOAT_FORMAT)
    logger.info(f"Backtest report saved: {path}")
    return path


def read_backtest(path: str) -> pd.DataFrame:
    return _read_csv(path, ["strategy", "metric", *MARKETS, COMBINATION])


def render_backtest(frame: pd.DataFrame, gamma: Optional[float] = None) -> str:
    """Sharpe, annualized Sharpe and CEQ tables, strategies as rows."""
    titles = {
        "sharpe": "Sharpe ratio",
        "annual_sharpe": "Annualized Sharpe ratio",
        "ceq": "CEQ return" + (f" (gamma={gamma:g})" if gamma is not None else ""),
    }
    parts = []
    for metric in BACKTEST_METRICS:
        table = frame[frame["metric"] == metric].drop(columns="metric").set_index("strategy")
        parts.append(_render(table, titles[metric], 6 if metric == "ceq" else 4))
    return "\n".join(parts)
