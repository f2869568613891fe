"""Exception types raised across the package."""


class ShapeError(ValueError):
    pass


class EmptyOutputError(ShapeError):
    pass


class DomainError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class OrderingError(ValueError):
    """Raised when a contribution is requested from a later token to an earlier one."""


class StateError(RuntimeError):
    pass


class GradCheckError(ArithmeticError):
    pass


class DivergenceError(ArithmeticError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value
