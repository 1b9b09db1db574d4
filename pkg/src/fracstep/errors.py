"""Exception hierarchy shared by all modules."""


class FracstepError(Exception):
    """Base class for all package errors."""


class InvalidArgument(FracstepError, ValueError):
    """Malformed input: bad sizes, shapes, or out-of-range parameters."""


class DomainError(FracstepError, ValueError):
    """A constitutive function was evaluated outside its domain."""


class NumericFailure(FracstepError, RuntimeError):
    """An iterative solver did not converge.

    Carries the last iterate and residual so callers can inspect them.
    """

    def __init__(self, message, x=None, residual=None, step=None):
        super().__init__(message)
        self.x = x
        self.residual = residual
        self.step = step


class ConsistencyFailure(FracstepError, RuntimeError):
    """A structural invariant was violated during a strict-mode run."""

    def __init__(self, message, invariant=None):
        super().__init__(message)
        self.invariant = invariant
