"""Exception hierarchy shared across the solver."""


class MFCError(Exception):
    """Base class for all package errors."""


class ConfigError(MFCError):
    """Invalid configuration or out-of-range model parameters."""


class NumericError(MFCError):
    """Non-finite values or numerically meaningless state."""


class InstabilityError(NumericError):
    """Unbounded growth detected while integrating a linear flow."""


class CapabilityError(MFCError):
    """Requested operation outside the supported dimension/size envelope."""


class SolverError(MFCError):
    """Generic iterative-solver failure."""


class NewtonError(SolverError):
    """Newton iteration on the first-order condition did not converge."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ConeViolationError(SolverError):
    """State left the cone on which the Hamiltonian minimizer is unique."""

    def __init__(self, message, node=None):
        super().__init__(message)
        self.node = node


class NonContractionError(SolverError):
    """Picard iteration failed to contract; caller should shrink the interval."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class StagnationError(SolverError):
    """Residual plateaued above tolerance across outer sweeps."""


class GlobalSolveError(SolverError):
    """Global pasting failed after interval halving bottomed out."""


class ComparisonError(MFCError):
    """Two reports are not comparable (grid or shape mismatch)."""
