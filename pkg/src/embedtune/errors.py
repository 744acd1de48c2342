"""Exception types shared across the package.

The CLI maps :class:`UsageError` subclasses to exit code 2 and
:class:`NumericalError` subclasses to exit code 3.
"""


class EmbedTuneError(Exception):
    """Base class for all package errors."""


class UsageError(EmbedTuneError, ValueError):
    """Invalid arguments, empty inputs, or API misuse."""


class ShapeError(UsageError):
    pass


class ParameterError(UsageError):
    pass


class VocabIndexError(UsageError, IndexError):
    """A token id outside ``0..V-1``."""


class TokenizationError(UsageError):
    def __init__(self, symbol: str, offset: int):
        super().__init__(f"unknown symbol {symbol!r} at offset {offset}")
        self.symbol = symbol
        self.offset = offset


class CapacityError(UsageError):
    """Sequence longer than the model's ``max_seq``."""


class FormatError(UsageError):
    """A file could not be parsed (bad magic, truncation, malformed header)."""


class IntegrityError(FormatError):
    """Stored content hash does not match the file contents."""


class VersionError(FormatError):
    pass


class CompatibilityError(UsageError):
    """A prompt artifact was built against a different checkpoint."""


class NumericalError(EmbedTuneError, ArithmeticError):
    pass


class DivergenceError(NumericalError):
    def __init__(self, epoch: int, detail: str = ""):
        msg = f"optimization diverged at epoch {epoch}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
        self.epoch = epoch
