"""Error types shared across modules."""


class ShapeError(ValueError):
    """An input sequence, matrix, or tensor has the wrong shape."""


class ParameterError(ValueError):
    """A parameter lies outside its valid range."""
