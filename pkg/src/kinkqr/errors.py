"""Exception types shared across the package."""

from __future__ import annotations


class KinkQrError(Exception):
    """Base class for all library errors."""


class InvalidInputError(KinkQrError, ValueError):
    """An argument violates a documented precondition (non-finite value,
    bad dimension, malformed quantile grid, ...)."""


class InvalidDataError(KinkQrError, ValueError):
    """A dataset violates its structural invariants.

    Carries the full validation report on ``.report``.
    """

    def __init__(self, report):
        self.report = report
        super().__init__(str(report))


class CsvFormatError(KinkQrError, ValueError):
    """A CSV file does not conform to the documented schema.  The message
    names the offending line number."""


class SingularDesignError(KinkQrError):
    """Design matrix is rank deficient (smallest singular value below
    tolerance)."""


class NonConvergenceError(KinkQrError):
    """Interior-point iteration cap exceeded.  ``.best`` holds the best
    iterate found so far."""

    def __init__(self, message, best=None):
        self.best = best
        super().__init__(message)


class InfeasibleError(KinkQrError):
    """Constraint system reported infeasible (should not occur for the
    row-wise non-crossing formulation; guarded anyway)."""


class DegenerateProfileError(KinkQrError):
    """Profile objective is flat over the search grid, suggesting there is
    no identifiable kink."""


class EstimationFailedError(KinkQrError):
    """Too many profile evaluations failed for the estimate to be trusted."""


class DensityEstimationError(KinkQrError):
    """A perturbed-level quantile fit needed by the difference-quotient
    density estimator failed."""


class NearSingularCovarianceError(KinkQrError):
    """A covariance building block is numerically singular."""


class TestFailedError(KinkQrError):
    """A hypothesis-test computation could not be completed reliably."""
