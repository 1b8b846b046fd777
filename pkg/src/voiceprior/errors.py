"""Typed errors raised across the package.

Every error derives from :class:`VoicePriorError`; the CLI prints the class
name of whatever it catches, so the names are part of the user-facing
surface.
"""


class VoicePriorError(Exception):
    """Base class for all domain errors."""


# audio / dsp
class MalformedHeader(VoicePriorError):
    pass


class UnsupportedFormat(VoicePriorError):
    pass


class IoFailure(VoicePriorError):
    pass


class TooShort(VoicePriorError):
    pass


class NoVoicedFrames(VoicePriorError):
    pass


# corpus
class InsufficientData(VoicePriorError):
    pass


class NonFiniteValue(VoicePriorError):
    pass


# captions
class EmptySpec(VoicePriorError):
    pass


class EmptyCaption(VoicePriorError):
    pass


class UnrecognizedClause(VoicePriorError):
    def __init__(self, clause: str):
        super().__init__(clause)
        self.clause = clause


class DuplicateAttribute(VoicePriorError):
    pass


class UnknownAttribute(VoicePriorError):
    pass


# numerics
class DimensionMismatch(VoicePriorError):
    pass


class NonFiniteGradient(VoicePriorError):
    pass


class NonFiniteLoss(VoicePriorError):
    pass


class NonFiniteState(VoicePriorError):
    pass


class ZeroNormEmbedding(VoicePriorError):
    pass


class TimeOutOfRange(VoicePriorError):
    pass


class InvalidParams(VoicePriorError):
    pass


class PreconditionError(VoicePriorError):
    pass


# pipeline
class MissingCheckpoint(VoicePriorError):
    pass


class StageError(VoicePriorError):
    """A training stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause
