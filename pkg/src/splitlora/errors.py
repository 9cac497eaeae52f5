"""Exception hierarchy shared by every module."""


class SplitLoraError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SplitLoraError, ValueError):
    pass


class ParameterError(SplitLoraError, ValueError):
    pass


class NumericError(SplitLoraError, ArithmeticError):
    pass


class StructureError(SplitLoraError, ValueError):
    """Adapter sets or nodes disagree on sites, shapes or ranks."""


class ConfigError(SplitLoraError, ValueError):
    pass


class DataError(SplitLoraError, ValueError):
    pass


class StateError(SplitLoraError, RuntimeError):
    """A cache or node was used out of protocol order."""


class AccountingError(SplitLoraError, ValueError):
    pass
