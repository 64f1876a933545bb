"""Exception hierarchy shared across the package."""


class FimpError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(FimpError, ValueError):
    """Invalid configuration value; the message names the offending field."""


class DimensionError(FimpError, ValueError):
    """Operand shapes are incompatible."""


class ShapeError(DimensionError):
    """Input extents do not divide into the requested patches or segments."""


class VocabularyError(FimpError, IndexError):
    """A feature id falls outside the embedding table."""


class NumericInstabilityError(FimpError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class DivergenceError(NumericInstabilityError):
    """Training loss became non-finite.

    Attributes:
        step: optimizer step at which the loss was observed.
    """

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class FormatError(FimpError, ValueError):
    """A serialized file is malformed.

    Attributes:
        offset: byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TransferError(FimpError, ValueError):
    """Pretrained weights cannot be mapped onto the target message creator."""
