"""Exception types shared across the package."""


class TalonError(Exception):
    """Base class for all package-specific errors."""


class ContractViolation(TalonError, ValueError):
    """An argument violated a documented precondition."""


class ValidationError(TalonError, ValueError):
    """Inputs are well-formed but semantically inconsistent."""


class FormatError(TalonError, ValueError):
    """A file or byte stream does not conform to its declared format."""


class NumericalError(TalonError, ArithmeticError):
    """A numerical routine could not produce a reliable result."""
