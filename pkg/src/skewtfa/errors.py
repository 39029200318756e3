"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside a function's mathematical domain."""


class NumericError(ArithmeticError):
    """A numerical routine failed (singular factorization, overflow, ...)."""


class UnreliableEstimateError(NumericError):
    """A Monte Carlo estimate has too small an effective sample size."""


class FitFailure(RuntimeError):
    """Every start of a model fit degenerated or failed."""
