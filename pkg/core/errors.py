"""
Exception hierarchy shared by every engine.

Each failure class carries the process exit code `main.py` uses when the
error escapes a subcommand.
"""
from typing import Optional


class GraphCnnPredError(Exception):
    exit_code = 1


# ── Configuration (exit 2) ─────────────────────────────────────────────

class ConfigError(GraphCnnPredError, ValueError):
    exit_code = 2


class NetworkConfigError(ConfigError):
    pass


class DimensionError(ConfigError):
    pass


class WindowTooShortError(ConfigError):
    pass


class EmptyReductionError(ConfigError):
    pass


# ── Data (exit 3) ──────────────────────────────────────────────────────

class DataError(GraphCnnPredError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message: str, line: Optional[int] = None, path: Optional[str] = None):
        self.line = line
        self.path = path
        where = ""
        if path:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class SchemaError(DataError):
    pass


class AlignmentError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class DomainError(DataError):
    pass


class SplitError(DataError):
    pass


class StaleDataError(DataError):
    pass


class ContainerError(DataError):
    pass


class MissingMarketFileError(DataError):
    def __init__(self, market: str, path: str):
        self.market = market
        self.path = path
        super().__init__(f"no data file for market {market}: {path} does not exist")


# ── Training (exit 4) ──────────────────────────────────────────────────

class TrainingError(GraphCnnPredError, ValueError):
    exit_code = 4


class OptimizerError(TrainingError):
    def __init__(self, parameter: str, message: str = "non-finite gradient"):
        self.parameter = parameter
        super().__init__(f"{message} for parameter '{parameter}'")


class MetricError(TrainingError):
    pass


class NonFiniteLossError(TrainingError):
    def __init__(self, epoch: int, batch: int, value: float):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")


# ── Backtest (exit 5) ──────────────────────────────────────────────────

class BacktestError(GraphCnnPredError, ValueError):
    exit_code = 5


class UndefinedSharpeError(BacktestError):
    pass


class BacktestAlignmentError(BacktestError):
    pass
