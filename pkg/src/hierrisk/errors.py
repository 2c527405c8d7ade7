"""Exception types raised across the package."""


class SchemaError(ValueError):
    """Input file or column mapping does not match the expected layout."""


class ValidationError(ValueError):
    """Data violate a structural invariant (interval ordering, overlap, ...)."""


class ConvergenceError(RuntimeError):
    """Newton iterations failed to converge.

    The last iterate is kept on the exception so callers can inspect or
    restart from it.
    """

    def __init__(self, message, last_iterate=None, iterations=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.iterations = iterations


class NumericalError(FloatingPointError):
    """Non-finite linear predictor; retry with a shorter step or rescaled data."""


class DegenerateTestError(ValueError):
    """Z-test requested with zero variance."""


class SelectionError(RuntimeError):
    """A fit failed during variable selection; ``trace`` holds the completed steps."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
