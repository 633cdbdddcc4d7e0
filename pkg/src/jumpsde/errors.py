"""Exception hierarchy shared by all jumpsde modules."""


class JumpSDEError(Exception):
    """Base class for every error raised by jumpsde."""


class ProjectionError(JumpSDEError):
    """Closest-point projection could not be computed.

    ``iterate`` holds the last Newton iterate (or the input point) so callers
    can inspect where the iteration stalled.
    """

    def __init__(self, message, iterate=None):
        super().__init__(message)
        self.iterate = iterate


class OutsideTubeError(ProjectionError):
    pass


class DegenerateNormalError(JumpSDEError):
    pass


class NonParallelityError(JumpSDEError):
    pass


class AlphaNotWellDefinedError(JumpSDEError):
    pass


class IntrinsicMetricUnsupported(JumpSDEError):
    pass


class InverseDidNotConverge(JumpSDEError):
    def __init__(self, message, kappa=None, residual=None):
        super().__init__(message)
        self.kappa = kappa
        self.residual = residual


class CertificationError(JumpSDEError):
    """No bump radius satisfied the contraction target."""

    def __init__(self, message, kappa=None):
        super().__init__(message)
        self.kappa = kappa


class NumericalBlowUp(JumpSDEError):
    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class ContractViolation(JumpSDEError, ValueError):
    pass


class ConfigError(JumpSDEError, ValueError):
    """Invalid run configuration; ``path`` locates the offending field."""

    def __init__(self, path, message):
        self.path = path
        self.message = message
        super().__init__(f"{path}: {message}" if path else message)
