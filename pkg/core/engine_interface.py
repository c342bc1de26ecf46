from abc import ABC, abstractmethod
from typing import Dict, List, Sequence

import numpy as np

from core.types import FeatureGraph, PositionSeries, RawMarketTable


class MarketSource(ABC):
    @abstractmethod
    def load_tables(self, markets: Sequence[str]) -> Dict[str, RawMarketTable]:
        """
        Loads one feature table per market.
        Returns a dictionary keyed by market name.
        """
        pass


class GraphLayer(ABC):
    """A message-passing layer applied independently to every leading slice of node features."""

    def __init__(self, graph: FeatureGraph):
        self.graph = graph

    @abstractmethod
    def __call__(self, node_feats):
        """
        Applies the layer to a Tensor of shape (..., F, in_ch).
        Returns a Tensor of shape (..., F, out_ch).
        """
        pass

    @abstractmethod
    def parameters(self) -> List:
        """
        Returns the trainable Parameters of the layer.
        """
        pass


class Strategy(ABC):
    name: str = "strategy"

    @abstractmethod
    def positions(self, dates: List[str], classes: np.ndarray) -> PositionSeries:
        """
        Turns per-date, per-index predicted classes into unit positions.
        Returns a PositionSeries with values in {-1, 0, +1}.
        """
        pass
