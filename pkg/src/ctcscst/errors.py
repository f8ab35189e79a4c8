"""Exception types shared across the package."""


class CtcScstError(Exception):
    """Base class for all package errors."""


class InvalidInputError(CtcScstError, ValueError):
    """Malformed input: bad shapes, out-of-range indices, non-finite values."""


class InfeasibleTargetError(CtcScstError, ValueError):
    """The target cannot be produced by any alignment of the given length."""


class BudgetExceededError(CtcScstError, ValueError):
    """An exhaustive enumeration would exceed its size budget."""


class InvalidStateError(CtcScstError, RuntimeError):
    """A cached forward pass no longer matches the parameters it came from."""


class NonFiniteGradientError(CtcScstError, FloatingPointError):
    """Gradients contain NaN or inf; the optimizer step must be skipped."""
