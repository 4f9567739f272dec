"""Exception hierarchy shared by every flowvar module."""


class FlowVarError(Exception):
    pass


class ShapeError(FlowVarError, ValueError):
    pass


class DomainError(FlowVarError, ValueError):
    pass


class SingularityError(FlowVarError, ArithmeticError):
    """``I + t*Theta`` is (numerically) singular at time ``t``."""

    def __init__(self, message: str, t: float | None = None):
        super().__init__(message)
        self.t = t


class DegeneracyError(SingularityError):
    """A closed-form field is singular somewhere on [0, 1] (the 180 degree case)."""


class NumericError(FlowVarError, FloatingPointError):
    pass


class DivergenceError(FlowVarError, FloatingPointError):
    def __init__(self, message: str, step: int | None = None, trace=None):
        super().__init__(message)
        self.step = step
        self.trace = trace


class AmbiguityError(FlowVarError, ValueError):
    pass


class ConfigError(FlowVarError, ValueError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field
