"""Exceptions raised by survfuse"""

from __future__ import annotations


class SurvfuseError(Exception):
    """Base class of all survfuse errors"""


class DimensionError(SurvfuseError, ValueError):
    """Shapes or dimensions of operands do not agree"""


class PreconditionError(SurvfuseError, ValueError):
    """An input violates the precondition of an operation (e.g. empty bag)"""


class ContractError(SurvfuseError, ValueError):
    """An operation is called outside of its contract"""


class DomainError(SurvfuseError, ArithmeticError):
    """A value falls outside the mathematical domain of a function"""


class ParameterError(SurvfuseError, ValueError):
    """A numeric parameter is out of its allowed range"""


class NumericError(SurvfuseError, ArithmeticError):
    """Non-finite values encountered during a computation"""


class DegenerateModelError(SurvfuseError, ArithmeticError):
    """The model gives (numerically) no signal to attribute"""


class ConfigError(SurvfuseError, ValueError):
    """Invalid run configuration"""


class DataError(SurvfuseError, ValueError):
    """Invalid or insufficient data

    Args:
        msg: The message
        path: The file the data came from, if any
        line: The 1-based line number in the file, if any
    """

    def __init__(
        self,
        msg: str,
        path: str | None = None,
        line: int | None = None,
    ) -> None:
        self.msg = msg
        self.path = path
        self.line = line
        if path is not None and line is not None:
            msg = f"{path}:{line}: {msg}"
        elif path is not None:
            msg = f"{path}: {msg}"
        super().__init__(msg)
