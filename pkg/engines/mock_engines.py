import logging
import os
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd

from core.engine_interface import MarketSource
from core.types import MARKETS, RawMarketTable
from engines.csv_source import FILE_STEMS
from engines.dataprep import DATE_COLUMN, FEATURE_COLUMNS, SHARED_COLUMNS

logger = logging.getLogger(__name__)


class MockMarketSource(MarketSource):
    """
    Seeded synthetic stand-in for the five market files: correlated random
    walk closes with the usual indicator columns derived from them, and one
    set of shared series (factor-driven, so the correlation graph has
    structure) repeated in every table.
    """

    def __init__(self, n_days: int = 400, seed: int = 7, start: str = "2010-01-04"):
        self.n_days = n_days
        self.seed = seed
        self.start = start

    def _shared(self, rng: np.random.Generator, n: int) -> Dict[str, np.ndarray]:
        factors = np.cumsum(rng.normal(size=(4, n)), axis=1)
        columns = {}
        for i, name in enumerate(SHARED_COLUMNS):
            loading = rng.uniform(0.5, 1.5) * (1 if i % 3 else -1)
            noise = np.cumsum(rng.normal(scale=0.8, size=n))
            columns[name] = 100.0 + loading * factors[i % 4] + noise
        return columns

    @staticmethod
    def _indicators(close: pd.Series, volume: np.ndarray) -> Dict[str, pd.Series]:
        change = close.pct_change()
        columns = {
            "Close": close,
            "Volume": pd.Series(volume, index=close.index),
            "mom": change,
            "mom1": change.shift(1),
            "mom2": change.shift(2),
            "mom3": change.shift(3),
        }
        for n in (5, 10, 15, 20):
            columns[f"ROC_{n}"] = close.pct_change(n) * 100.0
        for n in (10, 20, 50, 200):
            columns[f"EMA_{n}"] = close.ewm(span=n, adjust=False).mean()
        return columns

    def load_tables(self, markets: Sequence[str]) -> Dict[str, RawMarketTable]:
        rng = np.random.default_rng(self.seed)
        dates = pd.bdate_range(self.start, periods=self.n_days, name=DATE_COLUMN)
        shared = self._shared(rng, self.n_days)
        common = rng.normal(size=self.n_days)

        tables = {}
        # Always generate all five so a subset request sees the same numbers.
        for market in MARKETS:
            shocks = 0.01 * (0.7 * common + 0.7 * rng.normal(size=self.n_days))
            close = pd.Series(1000.0 * np.exp(np.cumsum(0.0003 + shocks)), index=dates)
            volume = np.round(rng.lognormal(mean=20.0, sigma=0.3, size=self.n_days))
            columns = self._indicators(close, volume)
            columns.update({name: pd.Series(values, index=dates) for name, values in shared.items()})
            frame = pd.DataFrame(columns, index=dates)[list(FEATURE_COLUMNS)]
            tables[market] = RawMarketTable(market=market, frame=frame)
        logger.info(f"Generated {self.n_days} synthetic days for {list(markets)} (seed {self.seed})")
        return {m: tables[m] for m in markets}

    def write_csvs(self, directory: str, markets: Sequence[str] = MARKETS,
                   pattern: str = "Processed_{name}.csv") -> List[str]:
        """Writes the synthetic tables in the published file layout (Date first, a Name column last)."""
        os.makedirs(directory, exist_ok=True)
        paths = []
        for market, table in self.load_tables(markets).items():
            frame = table.frame.copy()
            frame.index = frame.index.strftime("%Y-%m-%d")
            frame["Name"] = market
            path = os.path.join(directory, pattern.format(name=FILE_STEMS.get(market, market)))
            frame.to_csv(path, index_label=DATE_COLUMN, float_format="%.10g")
            paths.append(path)
        logger.info(f"Wrote {len(paths)} synthetic market file(s) to {directory}")
        return paths
