"""Shared exception types."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ParameterError(ValueError):
    """An argument value is outside its allowed range."""


class GraphError(RuntimeError):
    """The autodiff graph is used in an unsupported way (e.g. non-scalar backward)."""


class UndefinedMetricError(ValueError):
    """A metric is requested on inputs for which it is not defined."""


class PoseExhaustedError(RuntimeError):
    """The active policy has no unvisited candidate pose left."""
