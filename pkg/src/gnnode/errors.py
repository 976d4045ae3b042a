"""Exception taxonomy shared across the package.

Two families matter to callers: configuration/validation problems (bad
graph, bad config file, shape mismatches at the API boundary) and numerical
failures (non-finite values, singular solves). The CLI maps the first family
to exit code 2 and the second to exit code 3.
"""


class GnnodeError(Exception):
    """Base class for package errors."""


class ConfigError(GnnodeError, ValueError):
    """Malformed or inconsistent configuration input."""


class GraphValidationError(ConfigError):
    """Plant-graph invariants violated; carries the full violation list."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class ShapeError(GnnodeError, ValueError):
    """Operand shapes incompatible with an operation's contract."""


class NumericalError(GnnodeError, ArithmeticError):
    """Numerical failure (non-finite values, singular systems)."""


class NonFiniteError(NumericalError):
    """An operation produced NaN or Inf."""

    def __init__(self, op, detail=""):
        self.op = op
        msg = f"non-finite values produced by op '{op}'"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NotFittedStateError(GnnodeError, RuntimeError):
    """A model/statistics object was used before being fitted."""
