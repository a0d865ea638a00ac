"""Exception types raised across the package."""


class C2FError(Exception):
    """Base class for every error raised by c2fmeta."""


class ZeroNorm(C2FError, ValueError):
    pass


class EmptyInput(C2FError, ValueError):
    pass


class DimensionMismatch(C2FError, ValueError):
    pass


class NonFiniteFunction(C2FError, ArithmeticError):
    pass


class NonPositiveTemperature(C2FError, ValueError):
    pass


class InvalidLabel(C2FError, ValueError):
    pass


class InvalidSpec(C2FError, ValueError):
    pass


class OverlappingSplit(C2FError, ValueError):
    pass


class EmptySplit(C2FError, ValueError):
    pass


class FormatError(C2FError, ValueError):
    """Malformed dataset or checkpoint file."""


class DivergenceDetected(C2FError, ArithmeticError):
    """Training loss became NaN or infinite."""


class EmptyDataset(C2FError, ValueError):
    pass


class InvalidNs(C2FError, ValueError):
    pass


class EmbeddingDimMismatch(C2FError, ValueError):
    pass


class InsufficientClasses(C2FError, ValueError):
    pass


class InsufficientSamples(C2FError, ValueError):
    pass


class EmptyClass(C2FError, ValueError):
    pass


class EmptyTrainSet(C2FError, ValueError):
    pass


class LengthMismatch(C2FError, ValueError):
    pass


class ConfigError(C2FError, ValueError):
    pass
