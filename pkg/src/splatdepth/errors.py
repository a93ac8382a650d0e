"""Exception hierarchy shared by all modules."""


class SplatError(Exception):
    """Base class for all library errors."""


class InvalidPrimitiveError(SplatError, ValueError):
    pass


class DegenerateCovarianceError(SplatError, ValueError):
    pass


class BehindCameraError(SplatError, ValueError):
    pass


class DegenerateProjectionError(SplatError, ValueError):
    """Raised when a splat's screen footprint is numerically meaningless."""


class FormatError(SplatError, ValueError):
    """Malformed input file or schema violation."""


class DataError(SplatError, ValueError):
    """Well-formed file carrying invalid values (NaN, inf, out of range)."""


class StateError(SplatError, RuntimeError):
    pass


class FitDivergedError(SplatError, RuntimeError):
    def __init__(self, iteration: int, message: str):
        super().__init__(f"loss diverged at iteration {iteration}: {message}")
        self.iteration = iteration
