"""Exception hierarchy shared by every module of the package."""


class DbislError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(DbislError, ValueError):
    pass


class NonFiniteResult(DbislError, FloatingPointError):
    pass


class EmptyTensor(DbislError, ValueError):
    pass


class NotScalar(DbislError, ValueError):
    pass


class DoubleBackwardUnsupported(DbislError, RuntimeError):
    pass


class EvenKernel(DbislError, ValueError):
    pass


class NonPositiveBandwidth(DbislError, ValueError):
    pass


class NoSource(DbislError, ValueError):
    pass


class DegenerateField(DbislError, ValueError):
    pass


class MissingGrad(DbislError, RuntimeError):
    pass


class NonFiniteLoss(DbislError, FloatingPointError):
    def __init__(self, term, value):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


class CoverageGap(DbislError, RuntimeError):
    pass


class EmptyMask(DbislError, ValueError):
    pass


class PatchTooLarge(DbislError, ValueError):
    pass


class ConfigError(DbislError, ValueError):
    pass


class BadMagic(DbislError, IOError):
    pass


class TruncatedPayload(DbislError, IOError):
    pass


class UnknownDtype(DbislError, IOError):
    pass
