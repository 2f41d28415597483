"""Shared exception types.

Domain errors signal inputs that violate an operation's contract; numerical
errors signal a computation that could not be completed (singular systems,
non-finite values). The CLI maps both to exit status 1.
"""


class AdvRealError(Exception):
    """Base class for package errors."""


class DomainError(AdvRealError, ValueError):
    """Input violates an operation precondition or type invariant."""


class NumericalError(AdvRealError, ArithmeticError):
    """A numeric computation failed (singular matrix, NaN/Inf, divergence)."""


class ManifestError(AdvRealError, ValueError):
    """A corpus manifest record is malformed or references missing data."""
