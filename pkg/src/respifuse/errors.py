"""Exception hierarchy shared across the package."""


class RespifuseError(Exception):
    """Base class for all package errors."""


# --- manifest / audio ingestion ---

class ManifestError(RespifuseError):
    pass


class MissingColumn(ManifestError):
    pass


class BadFoldIndex(ManifestError):
    pass


class DuplicatePatient(ManifestError):
    pass


class UnreadableFile(ManifestError):
    pass


class IoError(RespifuseError):
    pass


class UnsupportedEncoding(RespifuseError):
    pass


class CorruptHeader(RespifuseError):
    pass


# --- dsp ---

class UpsamplingRequired(RespifuseError):
    pass


class WrongSampleRate(RespifuseError):
    pass


class EmptyClip(RespifuseError):
    pass


class WrongLength(RespifuseError):
    pass


class OutOfRange(RespifuseError):
    pass


class EmptySet(RespifuseError):
    pass


class MixedSoundTypes(RespifuseError):
    pass


class SoundTypeMismatch(RespifuseError):
    pass


class AlreadyStandardized(RespifuseError):
    pass


# --- nncore / model ---

class ShapeMismatch(RespifuseError):
    pass


class DegenerateBatch(RespifuseError):
    pass


class OddSpatialDims(RespifuseError):
    pass


class TooSmall(RespifuseError):
    pass


class BadProbability(RespifuseError):
    pass


class BadTarget(RespifuseError):
    pass


class NonFiniteLoss(RespifuseError):
    pass


class UnstandardizedInput(RespifuseError):
    pass


class WrongArity(RespifuseError):
    pass


class SexMissing(RespifuseError):
    pass


class SexUnexpected(RespifuseError):
    pass


class MisalignedFrames(RespifuseError):
    pass


class VersionMismatch(RespifuseError):
    pass


class CorruptFile(RespifuseError):
    pass


# --- training / evaluation ---

class SingleClass(RespifuseError):
    pass


class WrongFoldCount(RespifuseError):
    pass


class CacheMiss(RespifuseError):
    pass


class EmptyFrameSet(RespifuseError):
    pass


class MissingFold(RespifuseError):
    pass


class GradCheckFailed(RespifuseError):
    pass
