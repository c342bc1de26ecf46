import hashlib
import logging
import os
from typing import Dict, Optional, Sequence

from core.engine_interface import MarketSource
from core.errors import MissingMarketFileError
from core.types import RawMarketTable
from engines.dataprep import load_market_csv

logger = logging.getLogger(__name__)

# Market name -> file stem used by the published dataset.
FILE_STEMS = {"SP500": "S&P", "DJI": "DJI", "NASDAQ": "NASDAQ", "NYSE": "NYSE", "RUSSELL": "RUSSELL"}


class CsvMarketSource(MarketSource):
    """Reads `<pattern>` files (default `Processed_{name}.csv`) from one directory."""

    def __init__(self, data_dir: str, pattern: str = "Processed_{name}.csv",
                 file_stems: Optional[Dict[str, str]] = None):
        self.data_dir = data_dir
        self.pattern = pattern
        self.file_stems = dict(FILE_STEMS if file_stems is None else file_stems)

    def path_for(self, market: str) -> str:
        return os.path.join(self.data_dir, self.pattern.format(name=self.file_stems.get(market, market)))

    def missing(self, markets: Sequence[str]) -> Dict[str, str]:
        paths = {m: self.path_for(m) for m in markets}
        return {m: p for m, p in paths.items() if not os.path.isfile(p)}

    def load_tables(self, markets: Sequence[str]) -> Dict[str, RawMarketTable]:
        absent = self.missing(markets)
        if absent:
            market, path = next(iter(absent.items()))
            logger.error(f"Missing market file(s): {list(absent)}")
            raise MissingMarketFileError(market, path)
        return {m: load_market_csv(self.path_for(m), m) for m in markets}

    def fingerprint(self, markets: Sequence[str]) -> Dict[str, Optional[str]]:
        """sha256 of each market file's bytes, None for a missing file."""
        digests: Dict[str, Optional[str]] = {}
        for market in markets:
            path = self.path_for(market)
            if not os.path.isfile(path):
                digests[market] = None
                continue
            sha = hashlib.sha256()
            with open(path, "rb") as f:
                for block in iter(lambda: f.read(1 << 20), b""):
                    sha.update(block)
            digests[market] = sha.hexdigest()
        return digests
