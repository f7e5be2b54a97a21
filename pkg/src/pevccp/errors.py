"""Exception hierarchy shared by the package."""

from __future__ import annotations

from typing import Any


class PevccpError(Exception):
    """Base class for all errors raised by this package."""


class InvalidTariffError(PevccpError, ValueError):
    pass


class ScenarioError(PevccpError, ValueError):
    """A scenario (or generator profile) violates its invariants."""

    def __init__(self, message: str, report: Any = None):
        super().__init__(message)
        self.report = report


class InfeasiblePevError(PevccpError, ValueError):
    """The energy polytope of a single vehicle is empty."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class ProjectionError(PevccpError, RuntimeError):
    """Projection did not converge; carries the best iterate found."""

    def __init__(self, message: str, best: Any = None, residual: float = float("nan")):
        super().__init__(message)
        self.best = best
        self.residual = residual


class InfeasibleProblemError(PevccpError, RuntimeError):
    """The fleet problem has no feasible point.

    ``family`` names the constraint family that fails: ``"energy"`` for a
    single vehicle's polytope, ``"power_cap"`` for the aggregate limit.
    """

    def __init__(self, message: str, family: str):
        super().__init__(message)
        self.family = family


class NonConvergenceError(PevccpError, RuntimeError):
    def __init__(self, message: str, best: Any = None):
        super().__init__(message)
        self.best = best


class ProtocolError(PevccpError, RuntimeError):
    """Violation of the synchronous message-passing protocol."""


class TopologyError(PevccpError, ValueError):
    pass


class FormatError(PevccpError, ValueError):
    """Malformed scenario or trace document."""
