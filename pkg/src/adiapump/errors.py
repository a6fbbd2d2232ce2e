"""Exception hierarchy shared by all modules."""


class AdiapumpError(Exception):
    """Base class for every error raised by the package."""


class DomainError(AdiapumpError, ValueError):
    pass


class ShapeError(AdiapumpError, ValueError):
    pass


class GapCollapseError(AdiapumpError):
    """The selected spectral part touches the rest of the spectrum."""


class ContourViolationError(AdiapumpError):
    pass


class ConvergenceError(AdiapumpError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class IntertwiningError(AdiapumpError):
    pass


class StructureError(AdiapumpError):
    """The selected spectral part is not a single (possibly degenerate) eigenvalue."""


class PeriodicityError(AdiapumpError):
    pass


class DegeneracyError(AdiapumpError):
    pass


class FrameError(AdiapumpError):
    pass


class NormalizationError(AdiapumpError):
    pass


class SelfIntersectionError(AdiapumpError):
    pass


class PreconditionError(AdiapumpError, ValueError):
    pass


class ConfigError(AdiapumpError, ValueError):
    pass
