"""Exception hierarchy shared by all modules."""


class DLROMError(Exception):
    """Base class for all errors raised by this package."""


class NonElliptic(DLROMError):
    pass


class SingularSystem(DLROMError):
    pass


class InvalidRho(DLROMError, ValueError):
    pass


class MarginViolation(DLROMError, ValueError):
    pass


class UnsupportedSmoothness(DLROMError, ValueError):
    pass


class IllConditioned(DLROMError):
    pass


class NotHermitian(DLROMError, ValueError):
    pass


class GridTooCoarse(DLROMError, ValueError):
    pass


class GridNotDyadic(DLROMError, ValueError):
    pass


class ShapeMismatch(DLROMError, ValueError):
    """Raised when a tensor does not fit a layer.

    ``layer_index`` points at the offending layer (None when unknown).
    """

    def __init__(self, message, layer_index=None):
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)
        self.layer_index = layer_index


class EmptySampleSet(DLROMError, ValueError):
    pass


class NotLinear(DLROMError, ValueError):
    pass


class ConversionFailure(DLROMError):
    pass


class Divergence(DLROMError, FloatingPointError):
    pass
