"""Exception types raised across the package."""


class PoolfixError(Exception):
    """Base class for all package errors."""


class ParameterError(PoolfixError, ValueError):
    """An argument is outside its admissible range."""


class InfeasibleError(PoolfixError):
    """Random generation could not satisfy its constraints within the retry budget."""


class ConvergenceError(PoolfixError):
    """An iterative solver hit its iteration budget.

    The largest KKT violation at the time of failure is kept in ``kkt_gap``.
    """

    def __init__(self, message, kkt_gap=float("nan")):
        super().__init__(message)
        self.kkt_gap = kkt_gap


class DegenerateError(PoolfixError):
    """A design matrix or variance vector is degenerate (zero row, column or variance)."""


class DetectionLoopError(PoolfixError):
    """The iterative detection loop exceeded its iteration cap."""


class UndefinedMetricError(PoolfixError, ValueError):
    """A metric is undefined for its inputs (e.g. relative error of a zero signal)."""
