"""Exception hierarchy shared across the package."""


class ReidError(Exception):
    pass


class ShapeError(ReidError, ValueError):
    """Operand shapes are incompatible with the operation."""


class DomainError(ReidError, ValueError):
    """A value lies outside the mathematical domain of the operation."""


class TensorFormatError(ReidError):
    """Base class for malformed TNSR files."""


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class UnsupportedDtypeError(TensorFormatError):
    pass


class TruncatedError(TensorFormatError):
    pass


class CheckpointError(ReidError):
    """Checkpoint container is malformed or incompatible."""


class DigestMismatchError(CheckpointError):
    pass


class MissingParameterError(CheckpointError):
    pass


class ConfigError(ReidError, ValueError):
    """Run configuration failed schema validation.

    ``path`` is the dotted key path of the offending entry.
    """

    def __init__(self, message: str, path: str = ""):
        super().__init__(message)
        self.path = path
