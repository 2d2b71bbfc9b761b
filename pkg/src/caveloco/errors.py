"""Exception hierarchy shared by every stage of the pipeline."""


class CavelocoError(Exception):
    """Base class for all library errors."""


# geometry
class NonPositiveDepth(CavelocoError):
    pass


class UnknownScreen(CavelocoError):
    pass


class OutOfPanel(CavelocoError):
    pass


class LayoutError(CavelocoError):
    pass


# calibration
class DoesNotFit(CavelocoError):
    pass


class Degenerate(CavelocoError):
    pass


class Singular(CavelocoError):
    pass


class CheiralityFailure(CavelocoError):
    pass


# synthetic scene
class BadParams(CavelocoError):
    pass


# tracking / reconstruction
class NonMonotoneFrame(CavelocoError):
    pass


class InsufficientViews(CavelocoError):
    pass


class NonMonotoneTimestamp(CavelocoError):
    pass


# recognition
class MissingRootJoints(CavelocoError):
    pass


class InsufficientJoints(CavelocoError):
    pass


class DegenerateDataset(CavelocoError):
    pass


class DimensionMismatch(CavelocoError):
    pass


class BadAlpha(CavelocoError):
    pass


# transport
class DecodeError(CavelocoError):
    pass


class BadMagic(DecodeError):
    pass


class BadVersion(DecodeError):
    pass


class BadLength(DecodeError):
    pass


class BadMessageType(DecodeError):
    pass


class BadActionCode(DecodeError):
    pass


class YawOutOfRange(DecodeError):
    pass


class ReceiveTimeout(CavelocoError, TimeoutError):
    pass


class EmptyRunDirectory(CavelocoError):
    """A report was requested for a directory with no run logs."""
