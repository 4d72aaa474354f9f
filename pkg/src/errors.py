from __future__ import annotations

from collections.abc import Sequence


class TrafficLGPError(Exception):
    exit_code = 1


class ValidationError(TrafficLGPError):
    exit_code = 1


class DataError(TrafficLGPError):
    exit_code = 2


class ColdStartError(DataError):
    """A row or column of a speed matrix has no observed entry."""

    def __init__(
        self,
        message: str,
        rows: Sequence[str] = (),
        columns: Sequence[int] = (),
    ):
        self.rows = list(rows)
        self.columns = list(columns)
        details = []
        if self.rows:
            details.append(f"rows {self.rows[:10]}")
        if self.columns:
            details.append(f"columns {self.columns[:10]}")
        if details:
            message = f"{message} ({'; '.join(details)})"
        super().__init__(message)


class NumericalError(TrafficLGPError):
    exit_code = 3
