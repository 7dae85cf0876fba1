"""Exception types raised across the package."""


class PerflabError(Exception):
    """Base class for all package errors."""


class GeometryUnresolved(PerflabError):
    pass


class GridMismatch(PerflabError):
    pass


class InvalidWeight(PerflabError):
    pass


class DegenerateMass(PerflabError):
    pass


class KernelUnresolved(PerflabError):
    pass


class SolverStalled(PerflabError):
    """Iterative solve did not reach its tolerance.

    ``history`` holds the relative residual per iteration (may be empty for
    eigen-solves).
    """

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class RankExceeded(PerflabError):
    pass


class OracleTooLarge(PerflabError):
    pass


class MeanZeroViolated(PerflabError):
    pass


class ListTooShort(PerflabError):
    pass


class EmptyBand(PerflabError):
    pass


class RankDeficientTrialSpace(PerflabError):
    pass


class InsufficientPoints(PerflabError):
    pass


class BudgetExceeded(PerflabError):
    pass
