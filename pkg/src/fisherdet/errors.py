"""Exception hierarchy shared across the package."""


class FisherDetError(Exception):
    """Base class for all package errors."""


class InputShapeError(FisherDetError, ValueError):
    pass


class ClassIndexError(FisherDetError, IndexError):
    pass


class NumericError(FisherDetError, ArithmeticError):
    pass


class DimensionError(FisherDetError, ValueError):
    pass


class ArchitectureError(FisherDetError, ValueError):
    pass


class LabelError(FisherDetError, ValueError):
    pass


class EmptyDataError(FisherDetError, ValueError):
    pass


class DegenerateDirectionError(FisherDetError, ArithmeticError):
    pass


class SizeLimitError(FisherDetError, ValueError):
    pass


class FormatError(FisherDetError, ValueError):
    """Malformed file on disk."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


class LayoutMismatchError(FormatError):
    pass
