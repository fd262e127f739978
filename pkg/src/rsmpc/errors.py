"""Exception types shared across the package."""


class DomainError(ValueError):
    """A point lies outside the domain where an operation is defined.

    ``index`` is the offending flat coordinate, or ``None`` if unknown.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ProblemError(ValueError):
    """Invalid problem data. ``period`` names the offending period if any."""

    def __init__(self, message, period=None):
        if period is not None:
            message = f"t={period}: {message}"
        super().__init__(message)
        self.period = period


class SolverError(RuntimeError):
    """The QP solver did not return an optimal point."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class BreakdownError(RuntimeError):
    """The risk-sensitive planning problem is unbounded for this gamma."""

    def __init__(self, message, kind=None, index=None):
        super().__init__(message)
        self.kind = kind  # "neurotic" | "euphoric"
        self.index = index


class DegeneracyError(RuntimeError):
    """A KKT system is singular in a way that does not indicate breakdown."""


class PolicyError(RuntimeError):
    """An MPC step failed. ``step`` is the period at which it happened."""

    def __init__(self, message, step, cause=None):
        super().__init__(f"step {step}: {message}")
        self.step = step
        self.cause = cause


class ConfigError(ValueError):
    """Configuration file could not be parsed or failed validation."""
