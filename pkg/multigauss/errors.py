"""Exception hierarchy for multigauss."""

from __future__ import annotations


class MultigaussError(Exception):
    """Base exception for multigauss errors."""

    def __init__(self, message: str, invariant: str | None = None) -> None:
        """Initialize MultigaussError.

        Args:
            message: Error message.
            invariant: Name of the violated constraint, if any.
        """
        super().__init__(message)
        self.invariant: str = invariant or type(self).__name__

    def to_dict(self) -> dict[str, str]:
        """Machine-readable form written to ``error.json``."""
        return {
            "error": type(self).__name__,
            "invariant": self.invariant,
            "message": str(self),
        }


class ConfigError(MultigaussError):
    """Invalid experiment configuration."""


class LatticeError(MultigaussError):
    """Invalid step distribution or torus geometry."""


class SpectralError(MultigaussError):
    """Positivity or quadrature failure in a Fourier-diagonal construction."""


class DecompositionError(MultigaussError):
    """Multiscale partition is not nonnegative or not representable."""


class ScheduleError(MultigaussError):
    """External-field schedule preconditions violated."""


class BudgetExceededError(MultigaussError):
    """Exhaustive enumeration would exceed its budget."""

    def __init__(self, message: str, requested: int, budget: int) -> None:
        """Initialize BudgetExceededError.

        Args:
            message: Error message.
            requested: Size that was asked for.
            budget: Largest admissible size.
        """
        super().__init__(message, invariant="enumeration-budget")
        self.requested = requested
        self.budget = budget


class ExpectationError(MultigaussError):
    """Expectation functional unsuitable for an exact identity check."""


class PeriodicityError(MultigaussError):
    """Activity is not periodic under constant field shifts."""


class SamplerError(MultigaussError):
    """Sampler cannot be run or its estimator failed a diagnostic gate."""
