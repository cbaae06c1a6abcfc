"""Exception hierarchy shared by every atlaskv module.

Class names double as the error names the CLI prints, so keep them stable.
"""


class AtlasKVError(Exception):
    """Base class for all domain errors."""


class UnknownRelation(AtlasKVError):
    pass


class ApiError(AtlasKVError):
    pass


class EmptyCorpus(AtlasKVError):
    pass


class DimMismatch(AtlasKVError):
    pass


class ShapeMismatch(AtlasKVError):
    pass


class NonFiniteInput(AtlasKVError):
    pass


class ZeroSize(AtlasKVError):
    pass


class DegenerateData(AtlasKVError):
    pass


class CorruptIndex(AtlasKVError):
    pass


class IoError(AtlasKVError, OSError):
    pass


class HotCapacityExceeded(AtlasKVError):
    pass


class MissingTruth(AtlasKVError):
    pass
