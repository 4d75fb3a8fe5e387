"""Exception types raised across the package."""


class VTokenError(Exception):
    pass


class ShapeError(VTokenError, ValueError):
    """Operand shapes are incompatible."""


class DomainError(VTokenError, ValueError):
    """Input lies outside an operation's mathematical domain."""


class NumericError(VTokenError, FloatingPointError):
    """NaN or inf encountered where finite values are required."""


class ContractError(VTokenError, ValueError):
    """A documented precondition of an operation was violated."""


class VocabularyError(VTokenError, KeyError):
    def __str__(self):  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class LengthError(VTokenError, ValueError):
    """Sequence exceeds the configured maximum length."""


class CheckpointError(VTokenError, ValueError):
    pass
