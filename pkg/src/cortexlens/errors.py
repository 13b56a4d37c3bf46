"""Exception types raised across cortexlens."""


class CortexLensError(Exception):
    """Base class for all cortexlens errors."""


class MissingFile(CortexLensError, FileNotFoundError):
    pass


class IoFailure(CortexLensError, OSError):
    pass


class DimensionMismatch(CortexLensError, ValueError):
    pass


class ShapeMismatch(DimensionMismatch):
    pass


class LengthMismatch(DimensionMismatch):
    pass


class BadAnnotation(CortexLensError, ValueError):
    pass


class BadAtlas(CortexLensError, ValueError):
    pass


class UnknownRoi(CortexLensError, KeyError):
    pass


class EmptyMask(CortexLensError, ValueError):
    pass


class RankDeficient(CortexLensError, ValueError):
    pass


class SingularSystem(CortexLensError, ValueError):
    pass


class TooFewImages(CortexLensError, ValueError):
    pass


class TooFewSamples(CortexLensError, ValueError):
    pass


class TooFewPoints(CortexLensError, ValueError):
    pass


class TooFewCategoryImages(CortexLensError, ValueError):
    pass


class DegenerateVariance(CortexLensError, ValueError):
    pass


class ConfigInvalid(CortexLensError, ValueError):
    pass
