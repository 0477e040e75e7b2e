"""Exception types shared across the package."""

from __future__ import annotations


class ChromaBVError(Exception):
    """Base class for domain errors (CLI exit code 65)."""


class ImageFormatError(ChromaBVError):
    """Unreadable, malformed or unsupported image/field file."""


class DimensionError(ChromaBVError, ValueError):
    pass


class ZeroBrightness(ChromaBVError):
    """A pixel with |u0| below the zero tolerance met strict decomposition."""


class NonZeroMean(ChromaBVError):
    """A residual that must lie in G (zero integral) does not."""

    def __init__(self, mean, tol):
        self.mean = mean
        self.tol = tol
        super().__init__(f"|integral| = {mean!r} exceeds tol {tol:g}")


class NonConvergence(ChromaBVError):
    """Iteration budget exhausted; ``result`` holds the best iterate."""

    def __init__(self, message, result=None, residual=None):
        self.result = result
        self.residual = residual
        super().__init__(message)


class PreconditionError(ChromaBVError, ValueError):
    pass
