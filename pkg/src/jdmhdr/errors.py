"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible.

    ``dimension`` names the offending axis (e.g. ``"input channels"``).
    """

    def __init__(self, message, dimension=None):
        super().__init__(message)
        self.dimension = dimension


class FormatError(ValueError):
    """A serialized file is malformed (bad magic, truncated payload, ...)."""


class DegenerateError(ValueError):
    """Input is valid in shape but numerically degenerate for the operation."""
