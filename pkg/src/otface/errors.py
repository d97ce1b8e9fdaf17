"""Exception types shared across the package."""


class OTFaceError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatchError(OTFaceError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ConfigurationError(OTFaceError, ValueError):
    """A configuration value is invalid or inconsistent."""


class DegenerateInputError(OTFaceError, ValueError):
    """An input is numerically degenerate (e.g. a near-zero vector)."""


class ContractError(OTFaceError, ValueError):
    """A caller violated an operation's precondition."""


class NumericalRegimeError(OTFaceError, ArithmeticError):
    """The requested computation underflows/overflows in this regime."""
