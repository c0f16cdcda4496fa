"""Exception hierarchy shared by every module."""


class KamaError(Exception):
    """Base class for all errors raised by this package."""


class DegenerateInput(KamaError, ValueError):
    pass


class BehindCamera(KamaError, ValueError):
    pass


class SizeMismatch(KamaError, ValueError):
    pass


class InvalidSpec(KamaError, ValueError):
    pass


class ModelError(KamaError, ValueError):
    """A model file or in-memory model violates its invariants."""


class ParseError(KamaError, ValueError):
    pass


class UnknownKeypointName(ParseError):
    pass


class PriorLoadError(KamaError, ValueError):
    pass


class NonFinite(KamaError, FloatingPointError):
    pass


class IoError(KamaError, OSError):
    pass
