"""Exception types shared across the package."""


class IncsplatError(Exception):
    """Base class for all package errors."""


class BehindCamera(IncsplatError):
    """Point maps to camera-frame depth at or below the near plane."""


class NonPositiveDepth(IncsplatError):
    pass


class DimensionMismatch(IncsplatError):
    pass


class StaleSnapshot(IncsplatError):
    """Scene was mutated between a forward render and its backward pass."""


class ShapeMismatch(IncsplatError):
    pass


class LengthMismatch(IncsplatError):
    pass


class TooSmall(IncsplatError):
    pass


class NoOverlap(IncsplatError):
    pass


class EmptyInput(IncsplatError):
    pass


class DivideByZero(IncsplatError):
    pass


class MissingFile(IncsplatError):
    pass


class BadFormat(IncsplatError):
    pass


class InsufficientFrames(IncsplatError):
    pass


class PnPFailure(IncsplatError):
    """PnP could not produce a pose. `reason` is one of
    'TooFewMatches', 'TooFewInliers', 'Degenerate'."""

    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class FrameRejected(IncsplatError):
    """Frame could not be tracked even after the global-reoptimize fallback."""
