from __future__ import annotations


class TryOnError(Exception):
    """Base class for all errors raised by the tryon package."""


class ShapeError(TryOnError):
    """Tensor dimensions, divisibility or element counts do not line up."""


class ConfigError(TryOnError):
    pass


class DataError(TryOnError):
    """Synthetic data could not be produced or read."""


class DivergenceError(TryOnError):
    pass


class PlanError(TryOnError):
    """Long-video plan geometry is infeasible or incomplete."""


class MetricError(TryOnError):
    pass


class ConditionError(TryOnError):
    """A conditioning input required by the network is missing."""
