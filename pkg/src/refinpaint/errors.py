"""Exception types shared across the package."""


class RefInpaintError(Exception):
    """Base class for all package errors."""


# dataset / io
class MissingFile(RefInpaintError):
    pass


class BadManifest(RefInpaintError):
    pass


class DimensionMismatch(RefInpaintError):
    pass


class BadCameraMatrix(RefInpaintError):
    pass


class IoError(RefInpaintError):
    pass


# geometry
class OutOfBounds(RefInpaintError):
    pass


class BehindCamera(RefInpaintError):
    pass


class NonUnitDirection(RefInpaintError):
    pass


class DegenerateRay(RefInpaintError):
    pass


class DegenerateDirection(RefInpaintError):
    pass


# alignment / linear solvers
class RankDeficient(RefInpaintError):
    pass


class SizeMismatch(RefInpaintError):
    pass


class SolverDiverged(RefInpaintError):
    pass


class EmptyMask(RefInpaintError):
    pass


class AllZeroConfidence(RefInpaintError):
    pass


class EmptyBand(RefInpaintError):
    pass


# disocclusion
class NonPositiveDisparity(RefInpaintError):
    pass


class ExternalCommandFailed(RefInpaintError):
    pass


class BadExternalOutput(RefInpaintError):
    pass


class MaskCoversEverything(RefInpaintError):
    pass


# training
class EmptyBatch(RefInpaintError):
    pass


class CacheStale(RefInpaintError):
    pass


class NonFiniteGradient(RefInpaintError):
    pass


# metrics / cli
class EmptyRegion(RefInpaintError):
    pass


class BadCheckpoint(RefInpaintError):
    pass


class BadViewIndex(RefInpaintError):
    pass
