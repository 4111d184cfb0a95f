"""Exception types shared across the package."""


class DimensionError(ValueError):
    """An op received inputs whose shapes do not fit together."""


class NumericError(ArithmeticError):
    """A computation produced NaN or Inf."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(ValueError):
    """A configuration file or block failed validation.

    ``path`` is the dotted location of the offending field, when known.
    """

    def __init__(self, message, path=None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class FormatError(ValueError):
    """A binary stream could not be decoded."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (at byte offset {offset})")
