"""
Market table ingestion, panel alignment, labeling, normalization,
windowing and chronological splitting.
"""
import logging
import math
import re
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core.errors import (
    AlignmentError,
    ConfigError,
    DomainError,
    InsufficientDataError,
    ParseError,
    SchemaError,
    SplitError,
    StaleDataError,
)
from core.types import (
    MARKETS,
    AlignedPanel,
    FeatureGraph,
    LabelScheme,
    LabelSet,
    PanelMode,
    RawMarketTable,
    SplitSpec,
    WindowSample,
)
from engines import container

logger = logging.getLogger(__name__)

DATE_COLUMN = "Date"

# Primitive features and technical indicators differ between markets.
MARKET_SPECIFIC_COLUMNS: Tuple[str, ...] = (
    "Close", "Volume", "mom", "mom1", "mom2", "mom3",
    "ROC_5", "ROC_10", "ROC_15", "ROC_20",
    "EMA_10", "EMA_20", "EMA_50", "EMA_200",
)

# Economic data, world indices, currencies, commodities, big US companies and futures.
SHARED_COLUMNS: Tuple[str, ...] = (
    "DTB4WK", "DTB3", "DTB6", "DGS5", "DGS10", "Oil", "Gold", "DAAA", "DBAA",
    "GBP", "JPY", "CAD", "CNY",
    "AAPL", "AMZN", "GE", "JNJ", "JPM", "MSFT", "WFC", "XOM",
    "FCHI", "FTSE", "GDAXI", "GSPC", "HSI", "IXIC", "SSEC", "RUT", "NYSE",
    "TE1", "TE2", "TE3", "TE5", "TE6", "DE1", "DE2", "DE4", "DE5", "DE6",
    "CTB3M", "CTB6M", "CTB1Y",
    "AUD", "Brent", "CAC-F", "copper-F", "WIT-oil", "DAX-F", "DJI-F", "EUR",
    "FTSE-F", "gold-F", "HSI-F", "KOSPI-F", "NASDAQ-F", "GAS-F", "Nikkei-F",
    "NZD", "silver-F", "RUSSELL-F", "S&P-F", "CHF", "Dollar index-F",
    "Dollar index", "wheat-F", "XAG", "XAU",
)

FEATURE_COLUMNS: Tuple[str, ...] = MARKET_SPECIFIC_COLUMNS + SHARED_COLUMNS
N_FEATURES = 82
N_COMBINED = len(MARKETS) * len(MARKET_SPECIFIC_COLUMNS) + len(SHARED_COLUMNS)

_MISSING_TOKENS = {"", "nan", "na", "null"}


# ──────────────────────────────────────────────
# Ingestion
# ──────────────────────────────────────────────

def load_market_csv(path: str, market: str) -> RawMarketTable:
    """
    Parses one market CSV into a date-sorted table with the 82 canonical
    feature columns. Empty cells are kept as missing values for
    `align_panel` to fill.
    """
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        raise ParseError(f"malformed row ({e})", line=int(match.group(1)) if match else None, path=path) from e
    except pd.errors.EmptyDataError as e:
        raise SchemaError(f"{path}: file is empty") from e

    missing = [c for c in (DATE_COLUMN,) + FEATURE_COLUMNS if c not in raw.columns]
    if missing:
        raise SchemaError(f"{path}: missing required column(s) {missing}")
    extra = [c for c in raw.columns if c != DATE_COLUMN and c not in FEATURE_COLUMNS]
    if extra:
        logger.warning(f"{market}: ignoring non-feature column(s) {extra}")

    # Line numbers count the header as line 1.
    dates = pd.to_datetime(raw[DATE_COLUMN].str.strip(), format="%Y-%m-%d", errors="coerce")
    bad_dates = np.flatnonzero(dates.isna().to_numpy())
    if bad_dates.size:
        row = int(bad_dates[0])
        raise ParseError(f"unparseable date {raw[DATE_COLUMN].iloc[row]!r}", line=row + 2, path=path)

    columns = {}
    for name in FEATURE_COLUMNS:
        text = raw[name].str.strip()
        is_missing = text.str.lower().isin(_MISSING_TOKENS)
        numeric = pd.to_numeric(text.where(~is_missing), errors="coerce")
        bad = np.flatnonzero((numeric.isna() & ~is_missing).to_numpy())
        if bad.size:
            row = int(bad[0])
            raise ParseError(f"non-numeric value {text.iloc[row]!r} in column '{name}'", line=row + 2, path=path)
        columns[name] = numeric.to_numpy(dtype=np.float64)

    frame = pd.DataFrame(columns, index=pd.DatetimeIndex(dates, name=DATE_COLUMN))
    duplicated = np.flatnonzero(frame.index.duplicated())
    if duplicated.size:
        row = int(duplicated[0])
        raise ParseError(f"duplicate date {frame.index[row].date()}", line=row + 2, path=path)
    frame = frame.sort_index(kind="mergesort")

    logger.info(f"Loaded {market}: {len(frame)} rows from {path}")
    return RawMarketTable(market=market, frame=frame)


def align_panel(
    tables: Mapping[str, RawMarketTable],
    mode: PanelMode,
    market: Optional[str] = None,
    markets: Sequence[str] = MARKETS,
) -> AlignedPanel:
    """
    Restricts every table to the common dates, forward-fills interior gaps,
    drops leading rows that are still incomplete and builds the feature
    matrix for the requested mode.
    """
    absent = [m for m in markets if m not in tables]
    if absent:
        raise SchemaError(f"missing market table(s): {absent}")
    mode = PanelMode(mode)
    if mode is PanelMode.SINGLE and market not in markets:
        raise ConfigError(f"single-market mode needs one of {list(markets)}, got {market!r}")

    common = tables[markets[0]].frame.index
    for m in markets[1:]:
        common = common.intersection(tables[m].frame.index)
    if len(common) == 0:
        raise AlignmentError("market tables share no dates")

    filled = {m: tables[m].frame.loc[common].sort_index().ffill() for m in markets}

    if mode is PanelMode.COMBINED:
        parts = [
            filled[m][list(MARKET_SPECIFIC_COLUMNS)].add_prefix(f"{m}_")
            for m in markets
        ]
        parts.append(filled[markets[0]][list(SHARED_COLUMNS)])
        features = pd.concat(parts, axis=1)
    else:
        features = filled[market][list(FEATURE_COLUMNS)]

    closes = pd.concat([filled[m]["Close"].rename(m) for m in markets], axis=1)
    complete = (features.notna().all(axis=1) & closes.notna().all(axis=1)).to_numpy()
    if not complete.any():
        raise AlignmentError("no date has complete data after forward fill")
    first = int(np.argmax(complete))
    if first:
        logger.info(f"Dropping {first} leading row(s) with missing values")
    features = features.iloc[first:]
    closes = closes.iloc[first:]

    if mode is PanelMode.COMBINED and tuple(markets) == MARKETS and features.shape[1] != N_COMBINED:
        raise SchemaError(f"combined panel has {features.shape[1]} features, expected {N_COMBINED}")

    dates = [d.strftime("%Y-%m-%d") for d in features.index]
    logger.info(f"Aligned panel ({mode.value}): {len(dates)} dates x {features.shape[1]} features")
    return AlignedPanel(
        dates=dates,
        values=features.to_numpy(dtype=np.float64),
        feature_names=list(features.columns),
        closes=closes.to_numpy(dtype=np.float64),
        mode=mode,
        market=market if mode is PanelMode.SINGLE else None,
    )


# ──────────────────────────────────────────────
# Returns and labels
# ──────────────────────────────────────────────

def nday_returns(close: np.ndarray, n: int) -> np.ndarray:
    """ret[t] = close[t+n] / close[t] - 1."""
    if not 1 <= n <= 10:
        raise ConfigError(f"return horizon must be in [1, 10], got {n}")
    close = np.asarray(close, dtype=np.float64)
    if len(close) <= n:
        raise InsufficientDataError(f"{len(close)} closes cannot give {n}-day returns")
    if np.any(close <= 0):
        raise DomainError("closing prices must be positive")
    return close[n:] / close[:-n] - 1.0


def daily_returns(close: np.ndarray) -> np.ndarray:
    return nday_returns(close, 1)


def label_binary(returns: np.ndarray) -> np.ndarray:
    return (np.asarray(returns) > 0).astype(np.int64)


def apply_ternary(returns: np.ndarray, low: float, high: float) -> np.ndarray:
    returns = np.asarray(returns, dtype=np.float64)
    labels = np.ones(returns.shape, dtype=np.int64)
    labels[returns > high] = 2
    labels[returns < low] = 0
    return labels


def label_ternary(returns: np.ndarray, train_mask: np.ndarray) -> Tuple[np.ndarray, float, float]:
    """
    Thresholds are the 35th and 65th percentiles (linear interpolation at
    position p*(n-1)) of the training returns; labels cover the whole series.
    """
    returns = np.asarray(returns, dtype=np.float64)
    train = returns[np.asarray(train_mask, dtype=bool)]
    if train.size < 3:
        raise InsufficientDataError(f"ternary thresholds need at least 3 training returns, got {train.size}")
    low, high = np.percentile(train, [35.0, 65.0])
    return apply_ternary(returns, low, high), float(low), float(high)


def build_labels(closes: np.ndarray, scheme: LabelScheme, horizon: int, train_rows: int) -> LabelSet:
    """Labels for every row that has a horizon-ahead close, one column per market."""
    scheme = LabelScheme(scheme)
    returns = np.column_stack([nday_returns(closes[:, j], horizon) for j in range(closes.shape[1])])
    if scheme is LabelScheme.BINARY01:
        return LabelSet(labels=label_binary(returns), returns=returns, scheme=scheme)

    train_mask = np.arange(len(returns)) < train_rows
    labels = np.empty(returns.shape, dtype=np.int64)
    thresholds = np.empty((returns.shape[1], 2), dtype=np.float64)
    for j in range(returns.shape[1]):
        labels[:, j], thresholds[j, 0], thresholds[j, 1] = label_ternary(returns[:, j], train_mask)
    return LabelSet(labels=labels, returns=returns, scheme=scheme, thresholds=thresholds)


# ──────────────────────────────────────────────
# Normalization, windows, splits
# ──────────────────────────────────────────────

def normalize(values: np.ndarray, train_rows: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Z-scores every column with the population mean/std of the first
    `train_rows` rows. Constant training columns map to 0.
    """
    if train_rows < 1:
        raise InsufficientDataError("normalization needs at least one training row")
    train = values[:train_rows]
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    varying = ~is_constant(train)
    safe = np.where(varying, std, 1.0)
    normalized = np.where(varying, (values - mean) / safe, 0.0)
    return normalized, mean, std


def is_constant(rows: np.ndarray) -> np.ndarray:
    """Per column: every value equals the first. Avoids trusting a rounded std."""
    return np.all(rows == rows[:1], axis=0)


def make_windows(values: np.ndarray, labels: LabelSet, dates: Sequence[str], window: int = 60) -> List[WindowSample]:
    """
    One sample per anchor row t with `window` rows of history ending at t
    and a label at t. Inputs are read-only views into `values`.
    """
    n_labeled = len(labels.labels)
    first_anchor = window - 1
    if window < 1 or n_labeled - first_anchor < 1:
        raise InsufficientDataError(
            f"{len(values)} rows with {n_labeled} labeled cannot form a {window}-day window"
        )
    samples = []
    for t in range(first_anchor, n_labeled):
        inputs = values[t - window + 1: t + 1]
        samples.append(WindowSample(
            inputs=inputs,
            labels=labels.labels[t],
            returns=labels.returns[t],
            anchor_date=dates[t],
            anchor_index=t,
        ))
    return samples


def split_counts(n_samples: int, spec: SplitSpec) -> Tuple[int, int, int]:
    n_train = int(math.floor(spec.train * n_samples + 1e-9))
    n_val = int(math.floor(spec.validation * n_samples + 1e-9))
    n_test = n_samples - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise SplitError(f"split {spec.name} of {n_samples} samples leaves an empty segment ({n_train}/{n_val}/{n_test})")
    return n_train, n_val, n_test


def chrono_split(samples: Sequence[WindowSample], spec: SplitSpec) -> Tuple[list, list, list]:
    anchors = [s.anchor_index for s in samples]
    if any(b <= a for a, b in zip(anchors, anchors[1:])):
        raise SplitError("samples must be in strictly increasing date order")
    n_train, n_val, _ = split_counts(len(samples), spec)
    return list(samples[:n_train]), list(samples[n_train:n_train + n_val]), list(samples[n_train + n_val:])


# ──────────────────────────────────────────────
# Prepared dataset
# ──────────────────────────────────────────────

@dataclass
class PreparedDataset:
    panel: AlignedPanel            # normalized values
    labels: LabelSet
    window: int
    horizon: int
    split: Tuple[int, int, int]
    train_rows: int
    norm_mean: np.ndarray
    norm_std: np.ndarray
    graph: FeatureGraph
    data_hash: str
    split_name: str
    tau: float
    signed_threshold: bool

    def samples(self) -> List[WindowSample]:
        return make_windows(self.panel.values, self.labels, self.panel.dates, self.window)

    def segments(self) -> Tuple[List[WindowSample], List[WindowSample], List[WindowSample]]:
        samples = self.samples()
        n_train, n_val, _ = self.split
        return samples[:n_train], samples[n_train:n_train + n_val], samples[n_train + n_val:]

    def to_container(self) -> Tuple[Dict[str, np.ndarray], Dict]:
        thresholds = self.labels.thresholds if self.labels.thresholds is not None else np.zeros((0, 2))
        arrays = {
            "values": self.panel.values,
            "closes": self.panel.closes,
            "labels": self.labels.labels,
            "returns": self.labels.returns,
            "thresholds": thresholds,
            "norm_mean": self.norm_mean,
            "norm_std": self.norm_std,
            "split": np.asarray(self.split),
            "edges": np.asarray(self.graph.edges, dtype=np.int64).reshape(-1, 2),
            "degrees": self.graph.degrees,
        }
        meta = {
            "data_hash": self.data_hash,
            "dates": self.panel.dates,
            "feature_names": self.panel.feature_names,
            "mode": self.panel.mode.value,
            "market": self.panel.market,
            "scheme": self.labels.scheme.value,
            "window": self.window,
            "horizon": self.horizon,
            "train_rows": self.train_rows,
            "split_name": self.split_name,
            "tau": self.tau,
            "signed_threshold": self.signed_threshold,
        }
        return arrays, meta

    def save(self, path: str) -> str:
        arrays, meta = self.to_container()
        return container.save(path, arrays, meta)

    @classmethod
    def load(cls, path: str, expected_hash: Optional[str] = None) -> "PreparedDataset":
        arrays, meta = container.load(path)
        if expected_hash is not None and meta["data_hash"] != expected_hash:
            raise StaleDataError(
                f"{path} was prepared with config hash {meta['data_hash']}, current config hashes to {expected_hash}; re-run prepare"
            )
        names = meta["feature_names"]
        panel = AlignedPanel(
            dates=meta["dates"],
            values=arrays["values"],
            feature_names=names,
            closes=arrays["closes"],
            mode=PanelMode(meta["mode"]),
            market=meta["market"],
        )
        scheme = LabelScheme(meta["scheme"])
        labels = LabelSet(
            labels=arrays["labels"],
            returns=arrays["returns"],
            scheme=scheme,
            thresholds=arrays["thresholds"] if scheme is LabelScheme.TERNARY012 else None,
        )
        graph = FeatureGraph(
            n_nodes=len(names),
            edges=tuple((int(u), int(v)) for u, v in arrays["edges"]),
            degrees=arrays["degrees"],
            feature_names=names,
        )
        return cls(
            panel=panel,
            labels=labels,
            window=meta["window"],
            horizon=meta["horizon"],
            split=tuple(int(x) for x in arrays["split"]),
            train_rows=meta["train_rows"],
            norm_mean=arrays["norm_mean"],
            norm_std=arrays["norm_std"],
            graph=graph,
            data_hash=meta["data_hash"],
            split_name=meta["split_name"],
            tau=meta["tau"],
            signed_threshold=meta["signed_threshold"],
        )


def prepare_dataset(
    tables: Mapping[str, RawMarketTable],
    mode: PanelMode,
    scheme: LabelScheme,
    split: SplitSpec,
    window: int = 60,
    horizon: int = 1,
    tau: float = 0.7,
    signed_threshold: bool = False,
    market: Optional[str] = None,
    data_hash: str = "",
) -> PreparedDataset:
    """
    Full preparation: align, count samples, derive the training rows,
    label, normalize and build the frozen feature graph from the
    normalized training rows.
    """
    from engines import graphbuild

    logger.info("Step 1: Aligning market tables")
    raw_panel = align_panel(tables, mode, market=market)

    n_samples = len(raw_panel) - horizon - window + 1
    if n_samples < 1:
        raise InsufficientDataError(
            f"{len(raw_panel)} aligned dates are too few for window {window} and horizon {horizon}"
        )
    counts = split_counts(n_samples, split)
    train_rows = window - 1 + counts[0]
    logger.info(f"Split {split.name}: {counts[0]}/{counts[1]}/{counts[2]} samples, {train_rows} training rows")

    logger.info("Step 2: Labeling returns")
    labels = build_labels(raw_panel.closes, scheme, horizon, train_rows)
    if labels.thresholds is not None:
        for m, (low, high) in zip(MARKETS, labels.thresholds):
            logger.info(f"  {m}: ternary thresholds low={low:.6f} high={high:.6f}")

    logger.info("Step 3: Normalizing with training statistics")
    values, mean, std = normalize(raw_panel.values, train_rows)
    panel = AlignedPanel(
        dates=raw_panel.dates,
        values=values,
        feature_names=raw_panel.feature_names,
        closes=raw_panel.closes,
        mode=raw_panel.mode,
        market=raw_panel.market,
    )

    logger.info("Step 4: Building the feature graph")
    corr = graphbuild.pearson_matrix(values[:train_rows], feature_names=panel.feature_names)
    graph = graphbuild.threshold_graph(corr, tau=tau, signed=signed_threshold)
    stats = graphbuild.graph_stats(graph)
    logger.info(f"  graph: {stats.n_edges} edges, {stats.isolated} isolated of {stats.n_nodes} nodes, "
                f"{len(stats.component_sizes)} components")

    return PreparedDataset(
        panel=panel,
        labels=labels,
        window=window,
        horizon=horizon,
        split=counts,
        train_rows=train_rows,
        norm_mean=mean,
        norm_std=std,
        graph=graph,
        data_hash=data_hash,
        split_name=split.name,
        tau=tau,
        signed_threshold=signed_threshold,
    )
