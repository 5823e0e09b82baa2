class BMoEError(Exception):
    """Base class for every error raised by this package."""


class RejectedInputError(BMoEError, ValueError):
    pass


class ConfigurationError(BMoEError, ValueError):
    pass


class TrainingDivergedError(BMoEError, ArithmeticError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class SolverNumericalError(BMoEError, ArithmeticError):
    """Simplex pivoting lost accuracy; ``trace`` lists (entering, leaving, pivot)."""

    def __init__(self, message: str, trace=()):
        super().__init__(message)
        self.trace = list(trace)
