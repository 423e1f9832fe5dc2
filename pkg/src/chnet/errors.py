"""Exception types shared across the package."""


class ChnError(Exception):
    """Base class for all package errors."""


class InvalidArgument(ChnError, ValueError):
    pass


class DataError(ChnError, ValueError):
    pass


class NumericalError(ChnError, ArithmeticError):
    pass


class ContractViolation(ChnError, RuntimeError):
    """Raised when a frozen object would be mutated."""


class UndefinedMetric(ChnError, ValueError):
    """A metric has no value for the given inputs (e.g. single-class AUROC)."""


class KindMismatch(DataError):
    """A checkpoint of one kind was loaded where another was expected."""
