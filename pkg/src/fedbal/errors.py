"""Exception types shared across the package."""


class FedbalError(Exception):
    """Base class for all package-specific errors."""


class InvalidDeviceError(FedbalError, ValueError):
    """A device field violates its physical constraints."""


class InvalidAllocationError(FedbalError, ValueError):
    """A bandwidth fraction is outside (0, 1] or an allocation is malformed."""


class InfeasibleTransmissionError(FedbalError, ValueError):
    """Transmission is impossible (zero rate with data to send)."""


class SolverFailure(FedbalError, RuntimeError):
    """Iterative solver did not converge; carries the best iterate found."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class ConfigError(FedbalError, ValueError):
    """A run configuration violates the documented schema."""


class ExperimentAborted(FedbalError, RuntimeError):
    """An experiment stopped mid-run; carries the partial round log."""

    def __init__(self, message, partial_log=None):
        super().__init__(message)
        self.partial_log = partial_log or []
