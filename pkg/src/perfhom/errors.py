"""Exception hierarchy shared by all perfhom modules."""


class PerfhomError(Exception):
    """Base class for every error raised by this package."""


class GeometryError(PerfhomError):
    pass


class MeshError(PerfhomError):
    pass


class DimensionError(PerfhomError):
    pass


class AssemblyError(PerfhomError):
    pass


class SolverError(PerfhomError):
    pass


class ConvergenceError(SolverError):
    """Iterative solve did not reach the requested tolerance.

    The final relative residual is kept on ``residual``.
    """

    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class SingularSystemError(SolverError):
    pass


class GridMismatchError(PerfhomError):
    pass


class InsufficientBurnInError(PerfhomError):
    pass


class ConfigError(PerfhomError):
    pass


class MissingArtifactError(PerfhomError):
    pass
