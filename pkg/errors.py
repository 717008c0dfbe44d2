"""Exception hierarchy for the forecasting pipeline.

Every error carries the exit code the CLI reports for it.
"""
from typing import Optional


class TabForecastError(Exception):
    exit_code = 1


# ------------------ Configuration (exit 2) ------------------
class ConfigError(TabForecastError):
    exit_code = 2


class InvalidSpec(ConfigError):
    pass


class InvalidCutoff(ConfigError):
    pass


class UnknownConfigKey(ConfigError):
    pass


# ------------------ Data (exit 3) ------------------
class DataError(TabForecastError):
    exit_code = 3


class MissingChannel(DataError):
    pass


class NonMonotonicTime(DataError):
    pass


class UnparseableRow(DataError):
    def __init__(self, message: str, line: Optional[int] = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class MissingSampleRate(DataError):
    pass


class SignalTooShort(DataError):
    pass


class NoBeatsFound(DataError):
    pass


class TooFewCycles(DataError):
    pass


class MissingAbp(DataError):
    pass


class DegenerateSignal(DataError):
    pass


class TooFewWindows(DataError):
    pass


class EmptyTestSet(DataError):
    pass


class IndexOutOfRange(DataError):
    pass


class ShapeMismatch(DataError, ValueError):
    pass


class VersionMismatch(DataError):
    pass


class CorruptPayload(DataError):
    pass


# ------------------ Numeric (exit 4) ------------------
class NumericError(TabForecastError):
    exit_code = 4


class DivergedLoss(NumericError):
    def __init__(self, message: str, epoch: Optional[int] = None, batch: Optional[int] = None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch


class SingularNormalEquations(NumericError):
    pass
