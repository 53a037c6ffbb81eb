"""Exception types shared across the package."""


class MBFError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(MBFError, ValueError):
    """Non-finite or otherwise malformed numeric input."""


class SymmetryError(InvalidInputError):
    """A matrix that must be symmetric is not."""


class ShapeError(MBFError, ValueError):
    pass


class InversionError(MBFError, ArithmeticError):
    def __init__(self, message, label=None):
        super().__init__(message if label is None else f"{label}: {message}")
        self.label = label


class ConvergenceError(MBFError, ArithmeticError):
    """An iterative method failed to converge; ``residual`` holds its last residual."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


class SizeError(MBFError, ValueError):
    pass


class UnsupportedLayerError(MBFError, TypeError):
    pass


class TheoremPreconditionError(MBFError, ValueError):
    pass


class DivergenceError(MBFError, ArithmeticError):
    def __init__(self, message, iteration):
        super().__init__(f"{message} at iteration {iteration}")
        self.iteration = iteration


class IdxFormatError(MBFError, ValueError):
    pass


class ConfigError(MBFError, ValueError):
    pass


class RunFailure(MBFError, RuntimeError):
    pass


class ConsistencyError(MBFError, ValueError):
    """Two inputs that must agree (e.g. image and label files) do not."""


class ExhaustiveFailureError(RunFailure):
    """Every cell of a grid search failed; ``table`` holds the per-cell results."""

    def __init__(self, message, table):
        super().__init__(message)
        self.table = table
