"""Exception types raised across fodf_kit.

Every error derives from :class:`FodfKitError` so callers (and the CLI) can
separate data problems from programming errors with a single ``except``.
"""


class FodfKitError(Exception):
    """Base class for all toolkit errors."""


class DataError(FodfKitError, ValueError):
    """Input data violates a documented contract."""


# volume_io
class MalformedHeader(DataError):
    pass


class PayloadSizeMismatch(DataError):
    pass


class UnsupportedDtype(DataError):
    pass


class InvalidVolume(DataError):
    pass


class IoFailure(FodfKitError, OSError):
    pass


class ColumnCountMismatch(DataError):
    pass


class NonUnitVector(DataError):
    pass


class ParseError(DataError):
    pass


class ShapeBlobMismatch(DataError):
    pass


class UnknownLayerKind(DataError):
    pass


# sphere
class TooFewDirections(DataError):
    pass


class KeepBelowShMinimum(DataError):
    pass


class UniformityUnattainable(DataError):
    pass


class UnderdeterminedDesign(DataError):
    pass


# sh
class OddOrder(DataError):
    pass


class UnderdeterminedFit(DataError):
    pass


class SingularSystem(DataError):
    pass


class DegenerateAnisotropy(DataError):
    """Both coefficient vectors need a nonzero k >= 2 part for ACC."""


# phantom
class ShapeTooSmall(DataError):
    pass


class MissingNoiselessSource(DataError):
    pass


# csd
class EmptyMask(DataError):
    pass


class TooFewAnisotropicVoxels(DataError):
    pass


class NonConvergenceWarning(UserWarning):
    """Active set was still changing when ``max_iter`` was reached."""


# net / trainer
class ShapeMismatch(DataError):
    pass


class NoPairsForBeta(DataError):
    pass


class DivergenceDetected(FodfKitError, FloatingPointError):
    pass


# eval
class DimsMismatch(DataError):
    pass


class TooFewNonzeroPairs(DataError):
    pass


# connectome
class DisconnectedGraph(DataError):
    pass


class ZeroWeightGraph(DataError):
    pass


class AsymmetricMatrix(DataError):
    pass


class NegativeWeight(DataError):
    pass
