"""Exception hierarchy shared by every module."""


class XModalError(Exception):
    """Base class for all domain errors raised by this package."""


class ShapeError(XModalError, ValueError):
    pass


class DomainError(XModalError, ValueError):
    """Input outside the mathematical domain of an operation (log of 0, division by 0, ...)."""


class GraphError(XModalError, RuntimeError):
    pass


class ConfigError(XModalError, ValueError):
    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        where = []
        if key is not None:
            where.append(f"key {key!r}")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class DegenerateInput(XModalError, ValueError):
    pass


class DegenerateCamera(XModalError, ValueError):
    pass


class DegenerateSplit(XModalError, ValueError):
    pass


class InsufficientSamples(XModalError, ValueError):
    pass


class ArchMismatch(XModalError, ValueError):
    pass


class NonFiniteLoss(XModalError, FloatingPointError):
    pass


class CorruptCheckpoint(XModalError, IOError):
    pass


class VersionError(XModalError, IOError):
    pass


class IoError(XModalError, IOError):
    pass
