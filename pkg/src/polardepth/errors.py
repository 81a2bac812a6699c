"""Exception hierarchy shared by every module."""


class PolarDepthError(Exception):
    """Base class for all package errors."""


class DimensionError(PolarDepthError, ValueError):
    """Array shapes are inconsistent or violate a size requirement."""


class DomainError(PolarDepthError, ValueError):
    """An input value lies outside the domain of the operation."""


class ConfigurationError(PolarDepthError, ValueError):
    """A configuration parameter violates its invariants."""


class DegenerateGeometryError(PolarDepthError, ArithmeticError):
    """Geometry is singular: zero disparity, collinear points, parallel vectors."""


class BoundsError(PolarDepthError, IndexError):
    """A pixel coordinate lies outside the image."""


class EmptyAggregationError(PolarDepthError, ValueError):
    """A mean was requested over an empty set of pixels."""


class NumericalError(PolarDepthError, ArithmeticError):
    """A loss or gradient evaluated to a non-finite value."""
