"""Exception types raised across the codec."""


class CodecError(Exception):
    """Base class for data errors (CLI exit code 1)."""


class EmptyTensor(CodecError):
    pass


class EmptyInput(CodecError):
    pass


class OverflowCoordinate(CodecError):
    pass


class ShapeError(CodecError):
    pass


class StageOrderViolation(CodecError):
    pass


class StreamExhausted(CodecError):
    pass


# Name used by the multiscale coding loop.
BitstreamExhausted = StreamExhausted


class CorruptStream(CodecError):
    pass


class ModelMismatch(CodecError):
    pass


class NoOverlap(CodecError):
    pass


class MalformedFile(CodecError):
    pass


class MalformedHeader(MalformedFile):
    pass


class CountMismatch(MalformedFile):
    pass


class UnsupportedEncoding(MalformedFile):
    pass


class TrainingDiverged(CodecError):
    pass
