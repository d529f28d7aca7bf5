"""Exception types shared across the package."""


class PopGraphError(Exception):
    """Base class for all package errors."""


class ShapeError(PopGraphError, ValueError):
    pass


class EmptyLossSupport(PopGraphError, ValueError):
    """A loss was requested over a mask with no active positions."""


class ConfigError(PopGraphError, ValueError):
    pass


class ParseError(PopGraphError, ValueError):
    pass


class ValidationError(PopGraphError, ValueError):
    pass


class SchemaError(PopGraphError, KeyError):
    pass


class DivergenceError(PopGraphError, RuntimeError):
    pass


class IncompatibleCheckpoint(PopGraphError, ValueError):
    pass


class FormatError(PopGraphError, ValueError):
    pass


class EmptyEval(PopGraphError, ValueError):
    pass


class UndefinedMetric(PopGraphError, ValueError):
    pass
