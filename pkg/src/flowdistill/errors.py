"""Exception types shared across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain an operation is defined on."""


class InvariantError(RuntimeError):
    """A structural invariant (schedule monotonicity, non-negative beta, ...) is violated."""


class DegenerateDensityError(ValueError):
    """The mixture density is not defined at the query point."""


class UnsupportedConfigurationError(ValueError):
    pass


class DistillationError(RuntimeError):
    """Raised when the optimization loop produces a non-finite gradient.

    ``snapshot`` carries the texture at the failing step for post-mortem.
    """

    def __init__(self, message, step=None, snapshot=None):
        super().__init__(message)
        self.step = step
        self.snapshot = snapshot
