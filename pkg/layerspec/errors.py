"""
Exception hierarchy shared by all layerspec modules.
"""


class LayerSpecError(Exception):
    """Base class for every error raised by layerspec"""


class ConfigError(LayerSpecError, ValueError):
    """Invalid physical configuration or numeric control"""


class IrrationalFluxError(ConfigError):
    """Flux per cell is not a rational N/M within tolerance"""


class DomainError(LayerSpecError, ValueError):
    """Special function evaluated outside its domain"""


class CoincidenceError(LayerSpecError, ValueError):
    """Kernel evaluated at coincident points"""


class PoleError(LayerSpecError, ArithmeticError):
    """Evaluation at (or within the guard of) a pole.

    Args:
        message: Human readable description.
        level: Energy of the offending level, if known.
        diverging: Number of eigencurves diverging at that level, if known.
    """

    def __init__(self, message: str, level: float | None = None, diverging: int | None = None):
        super().__init__(message)
        self.level = level
        self.diverging = diverging


class ConvergenceError(LayerSpecError, ArithmeticError):
    """A series, integration window or root search did not converge"""


class CoverageError(ConvergenceError):
    """Too many grid points of a torus scan lack a root"""


class NonGenericError(LayerSpecError):
    """Generic-case gate failed and the caller asked for strict handling"""
