"""Exception and warning types shared across the package."""


class InputError(ValueError):
    """Raised when arguments violate a documented precondition."""


class SolverError(RuntimeError):
    """Raised when a numerical solver cannot make progress."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class ConvergenceWarning(UserWarning):
    """Issued when an iterative solver stops at its iteration cap."""
