"""Exception hierarchy shared by every module of the package."""


class LLSError(Exception):
    """Base class for all package errors."""


class ShapeMismatch(LLSError, ValueError):
    pass


class NonFinite(LLSError, ValueError):
    pass


class DetachedTensor(LLSError, RuntimeError):
    pass


class EmptyClass(LLSError, ValueError):
    pass


class ZeroMap(LLSError, ValueError):
    pass


class DegenerateMap(LLSError, ValueError):
    pass


class LabelOutOfRange(LLSError, ValueError):
    pass


class InvalidConfig(LLSError, ValueError):
    pass


class MissingManifest(LLSError, FileNotFoundError):
    pass


class CorruptImage(LLSError, ValueError):
    pass


class SplitOverlap(LLSError, ValueError):
    pass


class InsufficientClasses(LLSError, ValueError):
    pass


class InsufficientSamples(LLSError, ValueError):
    pass


class DivergedLoss(LLSError, FloatingPointError):
    pass


class IOFailure(LLSError, OSError):
    pass
