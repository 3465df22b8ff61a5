"""Exception types raised across the package."""


class MosError(Exception):
    """Base class for recoverable input/format errors."""


class ManifestError(MosError, ValueError):
    pass


class AudioError(MosError, ValueError):
    pass


class CacheError(MosError):
    pass


class ChecksumError(CacheError):
    pass


class ModelFormatError(MosError, ValueError):
    pass


class UndefinedCorrelation(MosError, ValueError):
    """Raised when a correlation is undefined, e.g. for a constant input."""

    def __init__(self, msg: str = "undefined correlation"):
        super().__init__(msg)
