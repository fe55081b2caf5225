"""Exception types raised across the package."""


class ShapeSyncError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(ShapeSyncError, ValueError):
    pass


# mesh ingestion / geometry
class MeshError(ShapeSyncError):
    pass


class ParseError(MeshError, ValueError):
    pass


class DegenerateMesh(MeshError, ValueError):
    pass


class IndexOutOfRange(MeshError, IndexError):
    pass


class DisconnectedMeshWarning(UserWarning):
    """Some geodesic distances are infinite; affected entries are flagged."""


class NonManifoldWarning(UserWarning):
    pass


# shapes of arrays / collections
class ShapeMismatch(ShapeSyncError, ValueError):
    pass


class DimensionMismatch(ShapeMismatch):
    pass


class UniverseSizeMismatch(ShapeMismatch):
    pass


class KTooLarge(ShapeSyncError, ValueError):
    pass


class MissingPair(ShapeSyncError, KeyError):
    pass


class MissingMap(ShapeSyncError, KeyError):
    pass


# numerics
class NumericalError(ShapeSyncError, ArithmeticError):
    pass


class EigensolveFailure(NumericalError):
    pass


class SingularSystem(NumericalError):
    pass


class NotPositiveDefinite(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class NonFinite(NumericalError):
    pass


class InsufficientSpectrum(NumericalError):
    pass


class InfeasibleAssignment(ShapeSyncError, ValueError):
    pass
