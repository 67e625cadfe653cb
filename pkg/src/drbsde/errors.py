"""Exception types raised across the package."""


class DRBSDEError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DRBSDEError, ValueError):
    """Invalid model, law, driver or scenario configuration."""


class AssumptionPError(DRBSDEError, ValueError):
    """A conditional survival probability is not strictly positive."""


class PreconditionError(DRBSDEError, ValueError):
    """An input does not satisfy the precondition of an operation."""


class UndefinedNodeError(DRBSDEError, ValueError):
    """A zero-mass node was asked for a conditional value."""


class ConsistencyError(DRBSDEError, RuntimeError):
    """An internal identity that must hold exactly was broken."""


class DriverError(DRBSDEError, ValueError):
    """Driver violates its Lipschitz certificate or the lower bound on alpha."""


class BarrierError(DRBSDEError, ValueError):
    """Barriers are not strictly separated or the terminal value lies outside them."""


class NumericRangeError(DRBSDEError, OverflowError):
    """A recursion produced a non-finite value."""


class HypothesisError(DRBSDEError, ValueError):
    """Data do not satisfy the hypothesis of a link or comparison result."""


class RuleError(DRBSDEError, ValueError):
    """A stopping rule does not stop every path by the terminal node."""


class SizeError(DRBSDEError, ValueError):
    """Enumeration would exceed the configured cap."""


class RegressionError(DRBSDEError, ValueError):
    """Rank-deficient regression design without ridge regularization."""
