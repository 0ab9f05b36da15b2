from typing import Optional


class AgcnError(Exception):
    """Base class for every error raised by pyagcn."""


class DimensionError(AgcnError, ValueError):
    pass


class DataValidationError(AgcnError, ValueError):
    pass


class DegenerateInputError(AgcnError, ValueError):
    pass


class ArgumentError(AgcnError, ValueError):
    pass


class NumericalError(AgcnError, ArithmeticError):
    def __init__(
        self,
        message: str,
        iteration: Optional[int] = None,
        parameter: Optional[str] = None,
    ):
        super().__init__(message)
        self.iteration = iteration
        self.parameter = parameter
