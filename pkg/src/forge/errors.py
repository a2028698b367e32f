"""Exception hierarchy shared by every forge module."""


class ForgeError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgument(ForgeError, ValueError):
    pass


class InvalidRange(InvalidArgument):
    pass


class ShapeError(ForgeError, ValueError):
    pass


class NumericalError(ForgeError, ArithmeticError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class DegenerateLatent(ForgeError, ValueError):
    pass


class DegenerateGeometry(ForgeError, ValueError):
    pass


class DegenerateAxis(DegenerateGeometry):
    pass


class UndefinedCorrelation(ForgeError, ValueError):
    pass


class UndefinedMetric(ForgeError, ValueError):
    pass


class UndefinedTest(ForgeError, ValueError):
    pass


class UndefinedTask(ForgeError, ValueError):
    pass


class InsufficientData(ForgeError, ValueError):
    pass


class InvalidRun(ForgeError, RuntimeError):
    pass


class ConfigError(ForgeError, ValueError):
    """Config file failed validation; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
