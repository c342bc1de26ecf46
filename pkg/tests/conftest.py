import numpy as np
import pytest

from core.types import MARKETS
from engines.mock_engines import MockMarketSource
from tests.helpers import make_graph


@pytest.fixture
def rng():
    """Seeded generator, fresh per test."""
    return np.random.default_rng(42)


@pytest.fixture
def toy_graph():
    """Six features: a 4-cycle with a pendant node and one isolated node."""
    return make_graph(6, [(0, 1), (1, 2), (2, 3), (0, 3), (3, 4)])


@pytest.fixture(scope="session")
def mock_tables():
    return MockMarketSource(n_days=160, seed=3).load_tables(MARKETS)


@pytest.fixture
def market_csv_dir(tmp_path):
    """The five synthetic market files in the published layout."""
    directory = tmp_path / "data"
    MockMarketSource(n_days=160, seed=3).write_csvs(str(directory))
    return directory
