"""Exception types shared across the package."""

import numpy as np


class RaySampleError(Exception):
    pass


class FieldEvaluationError(RaySampleError, ValueError):
    """A field was queried at, or returned, a non-finite value."""

    def __init__(self, message: str, point):
        self.point = np.asarray(point, dtype=float)
        super().__init__(f"{message} at {self.point.tolist()}")


class DegenerateGradientError(RaySampleError, ArithmeticError):
    def __init__(self, message: str, point):
        self.point = np.asarray(point, dtype=float)
        super().__init__(f"{message} at {self.point.tolist()}")


class ProjectionError(DegenerateGradientError):
    """Newton projection hit a zero gradient; ``point`` is the last iterate."""


class EmptySurfaceError(RaySampleError):
    """No ray (or probe) found the level set."""


class UnsignedFieldError(RaySampleError):
    """A volume quantity was requested for an unsigned field."""


class MeshLoadError(RaySampleError, OSError):
    pass


class GridLoadError(RaySampleError, OSError):
    pass
