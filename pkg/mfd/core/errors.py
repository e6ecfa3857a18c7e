"""Error taxonomy shared by the data, estimation and simulation layers.

The CLI maps :class:`DataValidationError` and :class:`ParameterError` to exit
code 2 and :class:`EstimationError` to exit code 3.
"""
from __future__ import annotations

from typing import NoReturn


class MfdError(Exception):
    """Base class for every error raised by this package."""


class DataValidationError(MfdError, ValueError):
    def __init__(self, message: str, line: int | None = None) -> None:
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class PositivityError(DataValidationError):
    """A site lacks subjects in one of the four (z, g) cells, or has degenerate prevalence."""


class ParameterError(MfdError, ValueError):
    pass


class EstimationError(MfdError, RuntimeError):
    pass


class UndefinedEstimateError(EstimationError):
    """The efficacy ratio has an exactly zero denominator."""


class ConvergenceError(EstimationError):
    pass


def log_and_raise(log, exc: MfdError) -> NoReturn:
    log.error("{}: {}", type(exc).__name__, str(exc))
    raise exc
