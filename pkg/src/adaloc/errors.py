"""Exception hierarchy shared by every adaloc module."""


class AdalocError(Exception):
    """Base class for all errors raised by adaloc."""


class DimensionError(AdalocError, ValueError):
    """Operand shapes do not conform."""


class ContractError(AdalocError, ValueError):
    """A documented precondition was violated by the caller."""


class NumericError(AdalocError, ArithmeticError):
    """A computation produced NaN or Inf."""


class ParseError(AdalocError, ValueError):
    """A file or payload could not be decoded."""


class KeyValidationError(AdalocError, ValueError):
    """A key is malformed or does not cover its declared units."""


class StaleKeyError(AdalocError):
    """A key was presented against a model it was not derived from."""


class FingerprintError(AdalocError):
    """A locked model and a key do not belong together."""


class AdaptabilityViolation(AdalocError):
    """Parameters drifted outside the key's index set."""
