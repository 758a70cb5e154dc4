"""Exception types shared across the package."""


class ProxflowError(Exception):
    """Base class for all package-specific failures."""


class ConvergenceError(ProxflowError):
    """An iterative solver did not reach its tolerance within max_iter.

    Carries the last observed residual/defect so callers can decide whether
    the result is salvageable.
    """

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class NumericalError(ProxflowError):
    """A computation produced non-finite or otherwise unusable values."""
