"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class UnsupportedOpError(KeyError):
    """The autodiff tape was asked to record an unknown primitive."""


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""


class NumericalError(ArithmeticError):
    """A non-finite value appeared during computation.

    ``index`` carries the offending token index when one is known.
    """

    def __init__(self, message: str, index: int | None = None):
        if index is not None:
            message = f"{message} (token {index})"
        super().__init__(message)
        self.index = index


class InputError(ValueError):
    """Model input is invalid (e.g. a token id outside the vocabulary)."""
