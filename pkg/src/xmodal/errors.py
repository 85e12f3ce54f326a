"""Exception hierarchy shared by every module."""


class XModalError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(XModalError, ValueError):
    pass


class InputError(XModalError, ValueError):
    pass


class DegenerateInputError(XModalError, ValueError):
    """A feature vector has zero norm where a direction is required."""


class EvaluationError(XModalError, ArithmeticError):
    """A function evaluated to a non-finite value during gradient checking."""


class MiningExhaustedError(XModalError, RuntimeError):
    """Every negative candidate for an anchor was excluded."""


class ConfigError(XModalError, ValueError):
    pass


class NonFiniteError(XModalError, FloatingPointError):
    pass
