"""Exception types shared across the package."""


class StructureError(ValueError):
    """Inconsistent dimensions, incidence pattern, or block layout."""


class ConvergenceError(RuntimeError):
    """An iterative inner solver failed to reach its tolerance."""

    def __init__(self, message, grad_norm=None):
        super().__init__(message)
        self.grad_norm = grad_norm


class NumericsError(RuntimeError):
    """A numerical routine could not produce a reliable result."""


class GenerationError(RuntimeError):
    """Random instance generation exhausted its retry budget."""


class UnsupportedInstanceError(ValueError):
    """The operation's preconditions exclude this problem instance."""


class LocalityError(RuntimeError):
    """A simulated message was attempted across a non-edge."""
