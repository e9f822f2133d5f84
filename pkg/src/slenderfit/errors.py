"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an operation receives arguments violating its contract."""


class GenerationError(RuntimeError):
    """Raised when the synthetic generator exhausts its rejection budget."""


class RefinementError(RuntimeError):
    """Raised when a refinement job cannot produce a result."""


class NonFiniteGradientError(RefinementError):
    """Raised when gradients become non-finite; names the offending groups."""

    def __init__(self, groups):
        self.groups = sorted(groups)
        super().__init__(
            "non-finite gradient in parameter group(s): " + ", ".join(self.groups)
        )
