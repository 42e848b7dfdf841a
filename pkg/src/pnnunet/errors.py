"""Exception hierarchy shared by all subsystems."""


class PNNError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(PNNError, ValueError):
    pass


class ConfigError(PNNError, ValueError):
    pass


class LabelError(PNNError, ValueError):
    pass


class TapeError(PNNError, RuntimeError):
    pass


class NumericError(PNNError, ArithmeticError):
    pass


class DomainError(PNNError, ValueError):
    pass


class FormatError(PNNError, ValueError):
    pass


class UnsupportedError(PNNError, NotImplementedError):
    pass


class SizeError(PNNError, ValueError):
    pass


class DataError(PNNError, ValueError):
    pass


class DegenerateVariance(PNNError, ArithmeticError):
    """Paired differences have zero spread but a nonzero mean."""


class DependencyError(PNNError, RuntimeError):
    """A run needs artifacts (e.g. member checkpoints) that do not exist."""


class IoError(PNNError, OSError):
    pass
