"""Exception hierarchy shared across the package."""


class GreenprecError(Exception):
    """Base class for all package errors."""


class ConfigurationError(GreenprecError):
    """Invalid user-supplied configuration (bad dimension, counts, schema)."""


class UnsupportedStencilError(ConfigurationError):
    """Requested discretization cannot represent the coefficient tensor."""


class FactorizationError(GreenprecError):
    """Dense factorization failed or did not reach the required accuracy."""


class SizeError(GreenprecError):
    """Problem size exceeds a configured cap."""


class NumericError(GreenprecError):
    """Non-finite value encountered during evaluation or training."""


class DivergenceError(NumericError):
    """Training loss blew past the divergence guard."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class MemoryBudgetError(GreenprecError):
    """A compressed representation would exceed the memory budget."""

    def __init__(self, message, stats=None):
        super().__init__(message)
        self.stats = stats or {}


class BreakdownError(GreenprecError):
    """Krylov process broke down without reaching the solution."""


class CheckpointError(GreenprecError):
    """Checkpoint file does not match the requested architecture."""
