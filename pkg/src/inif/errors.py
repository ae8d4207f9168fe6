"""Exception hierarchy shared by all modules.

Every exception carries the module and operation that raised it so the CLI
can print a diagnostic naming both.
"""


class InifError(Exception):
    """Base class for every error raised by this package."""

    module = "inif"

    def __init__(self, message, operation=None, module=None):
        super().__init__(message)
        self.operation = operation
        if module is not None:
            self.module = module

    def diagnostic(self):
        op = f".{self.operation}" if self.operation else ""
        return f"[{self.module}{op}] {self}"


class DataError(InifError, ValueError):
    """Invalid input data: shapes, dtypes, indices, file contents."""


class FormatError(DataError):
    """A container or bitstream could not be parsed."""


class BadMagic(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class UnsupportedDtype(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class CorruptStream(FormatError):
    pass


class MalformedBundle(FormatError):
    pass


class BudgetInfeasible(DataError):
    """The byte budget cannot hold the smallest allowed payload."""


class DivergenceError(InifError, ArithmeticError):
    """A loss, gradient, or update became non-finite."""

    def __init__(self, message, operation=None, module=None, step=None):
        super().__init__(message, operation, module)
        self.step = step

