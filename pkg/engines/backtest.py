"""
Trading evaluation of predicted classes: unit long/short/flat positions,
arithmetic PnL without costs, and Sharpe / annualized Sharpe / CEQ scores
per index and for the five-index combination.
"""
import logging
import math
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from core.engine_interface import Strategy
from core.errors import BacktestAlignmentError, BacktestError, DomainError, UndefinedSharpeError
from core.types import (
    MARKETS,
    BacktestReport,
    BacktestRow,
    CeqParams,
    HeadKind,
    MetricCell,
    PnlSeries,
    PositionSeries,
    PredictionSeries,
)

logger = logging.getLogger(__name__)

TRADING_DAYS = 252
COMBINATION = "Combination"
ALWAYS_LONG = "always long"

# class -> position
_TERNARY_POSITIONS = np.array([-1, 0, 1], dtype=np.int64)
_BINARY_POSITIONS = np.array([0, 1], dtype=np.int64)


def _map_classes(classes: np.ndarray, table: np.ndarray) -> np.ndarray:
    classes = np.asarray(classes)
    if classes.size and (classes.min() < 0 or classes.max() >= len(table)
                         or not np.all(classes == np.round(classes))):
        bad = sorted(set(np.unique(classes).tolist()) - set(range(len(table))))
        raise DomainError(f"classes {bad} outside {{0..{len(table) - 1}}}")
    return table[classes.astype(np.int64)]


def positions_from_ternary(dates: Sequence[str], classes: np.ndarray) -> PositionSeries:
    """2 (up) -> +1, 0 (down) -> -1, 1 (neutral) -> 0."""
    return PositionSeries(dates=list(dates), positions=_map_classes(classes, _TERNARY_POSITIONS))


def positions_from_binary(dates: Sequence[str], classes: np.ndarray) -> PositionSeries:
    """1 (up) -> +1, 0 -> flat."""
    return PositionSeries(dates=list(dates), positions=_map_classes(classes, _BINARY_POSITIONS))


class TernaryStrategy(Strategy):
    def __init__(self, name: str):
        self.name = name

    def positions(self, dates: List[str], classes: np.ndarray) -> PositionSeries:
        return positions_from_ternary(dates, classes)


class BinaryStrategy(Strategy):
    def __init__(self, name: str):
        self.name = name

    def positions(self, dates: List[str], classes: np.ndarray) -> PositionSeries:
        return positions_from_binary(dates, classes)


class AlwaysLong(Strategy):
    name = ALWAYS_LONG

    def positions(self, dates: List[str], classes: np.ndarray) -> PositionSeries:
        return PositionSeries(dates=list(dates), positions=np.ones(np.shape(classes), dtype=np.int64))


def strategy_for_head(head: HeadKind, name: str) -> Strategy:
    return BinaryStrategy(name) if HeadKind(head) is HeadKind.BINARY5 else TernaryStrategy(name)


# ──────────────────────────────────────────────
# PnL and metrics
# ──────────────────────────────────────────────

PnlLike = Union[PnlSeries, Sequence[float], np.ndarray]


def pnl(positions: PositionSeries, returns: np.ndarray, dates: Optional[Sequence[str]] = None) -> PnlSeries:
    """
    r_t = position_t * ret_t for unit notional. `returns` has the shape of
    the positions ((n,) for one index, (n, 5) for all of them); when `dates`
    is given it must equal the position dates.
    """
    returns = np.asarray(returns, dtype=np.float64)
    if dates is not None and list(dates) != list(positions.dates):
        raise BacktestAlignmentError("position dates do not match return dates")
    if returns.shape != np.shape(positions.positions) or len(positions.dates) != len(returns):
        raise BacktestAlignmentError(
            f"{np.shape(positions.positions)} positions over {len(positions.dates)} dates "
            f"cannot be matched with returns of shape {returns.shape}"
        )
    return PnlSeries(dates=list(positions.dates), values=positions.positions * returns)


def _values(r: PnlLike) -> np.ndarray:
    values = r.values if isinstance(r, PnlSeries) else r
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 1 or values.size < 2:
        raise BacktestError(f"risk metrics need a 1-D series of at least 2 values, got shape {values.shape}")
    return values


def _variance(values: np.ndarray) -> float:
    if np.all(values == values[0]):
        return 0.0
    return float(np.var(values))


def sharpe(r: PnlLike) -> float:
    """mean / population std. Zero variance is undefined, not 0."""
    values = _values(r)
    variance = _variance(values)
    if variance == 0.0:
        raise UndefinedSharpeError("Sharpe ratio undefined for a zero-variance PnL series")
    return float(np.mean(values) / math.sqrt(variance))


def annualize(sharpe_daily: float) -> float:
    return sharpe_daily * math.sqrt(TRADING_DAYS)


def ceq(r: PnlLike, params: CeqParams = CeqParams()) -> float:
    """Certainty-equivalent return: mean - gamma * variance / 2."""
    values = _values(r)
    return float(np.mean(values) - params.gamma * _variance(values) / 2.0)


def combine(pnls: Sequence[PnlSeries]) -> PnlSeries:
    """Elementwise sum of per-index PnL over identical dates."""
    if not pnls:
        raise BacktestError("nothing to combine")
    dates = pnls[0].dates
    for series in pnls[1:]:
        if series.dates != dates or np.shape(series.values) != np.shape(pnls[0].values):
            raise BacktestAlignmentError("combined PnL series must share their dates")
    return PnlSeries(dates=list(dates), values=np.sum([s.values for s in pnls], axis=0))


def metric_cell(r: PnlLike, params: CeqParams = CeqParams()) -> MetricCell:
    try:
        daily = sharpe(r)
    except UndefinedSharpeError:
        return MetricCell(sharpe=None, annual_sharpe=None, ceq=ceq(r, params))
    return MetricCell(sharpe=daily, annual_sharpe=annualize(daily), ceq=ceq(r, params))


# ──────────────────────────────────────────────
# Report rows
# ──────────────────────────────────────────────

def strategy_row(name: str, positions: PositionSeries, returns: np.ndarray,
                 params: CeqParams = CeqParams(), markets: Sequence[str] = MARKETS) -> BacktestRow:
    """One report row: every index column plus the Combination column."""
    series = pnl(positions, returns)
    per_index = {m: PnlSeries(dates=series.dates, values=series.values[:, j]) for j, m in enumerate(markets)}
    per_index[COMBINATION] = combine(list(per_index.values()))
    cells = {key: metric_cell(s, params) for key, s in per_index.items()}
    return BacktestRow(strategy=name, cells=cells, pnl=per_index)


def always_long(dates: Sequence[str], returns: np.ndarray, params: CeqParams = CeqParams(),
                markets: Sequence[str] = MARKETS) -> BacktestRow:
    returns = np.asarray(returns, dtype=np.float64)
    positions = AlwaysLong().positions(list(dates), returns)
    return strategy_row(ALWAYS_LONG, positions, returns, params, markets)


def run_backtest(dates: Sequence[str], returns: np.ndarray,
                 predictions: Sequence[Tuple[str, PredictionSeries]] = (),
                 params: CeqParams = CeqParams()) -> BacktestReport:
    """
    Always-long calibration row first, then one row per named prediction
    series. Every prediction series must cover exactly `dates`.
    """
    report = BacktestReport(gamma=params.gamma)
    report.rows.append(always_long(dates, returns, params))
    for name, series in predictions:
        if list(series.dates) != list(dates):
            raise BacktestAlignmentError(
                f"predictions for {name} cover {len(series.dates)} dates "
                f"({series.dates[:1]}..{series.dates[-1:]}), test segment has {len(dates)}"
            )
        positions = strategy_for_head(series.head, name).positions(series.dates, series.classes)
        report.rows.append(strategy_row(name, positions, returns, params))

    for row in report.rows:
        cell = row.cells[COMBINATION]
        shown = f"{cell.sharpe:.4f}" if cell.sharpe is not None else "n/a"
        logger.info(f"{row.strategy}: Combination Sharpe {shown}, CEQ {cell.ceq:.6f}")
    return report
