"""Exception types shared across the package."""


class AvsrError(Exception):
    """Base class for all errors raised by this package."""


class EmptyInput(AvsrError):
    pass


class UnsupportedSampleRate(AvsrError):
    pass


class UnsupportedFrameRate(AvsrError):
    pass


class InvalidFilterSpec(AvsrError):
    pass


class ShapeError(AvsrError):
    pass


class ConfigError(AvsrError):
    pass


class InvalidSwitchState(AvsrError):
    pass


class InvalidLabel(AvsrError):
    pass


class ImpossibleAlignment(AvsrError):
    pass


class DegenerateSnr(AvsrError):
    pass


class MissingMetadata(AvsrError):
    pass


class UndefinedCi(AvsrError):
    pass


class NonFiniteGradient(AvsrError):
    pass


class NonFiniteLoss(AvsrError):
    pass


class IncompatibleCheckpoint(AvsrError):
    pass


class DataError(AvsrError):
    """Bad manifest entries, unreadable media, corrupt containers."""
