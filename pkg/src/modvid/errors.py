"""Exception hierarchy shared by all modvid modules.

The CLI maps these onto exit-code classes (see modvid.cli), so library code
should raise the most specific type that applies rather than bare ValueError.
"""


class ModvidError(Exception):
    """Base class for every error raised by this package."""


class InvalidArgument(ModvidError):
    """A parameter combination or shape violates an operation's contract."""


class InvalidData(ModvidError):
    """Sample values violate a container invariant (negative, out of range, NaN)."""


class DegenerateInput(ModvidError):
    """The input is valid but the requested result is undefined on it."""


class PredictorContractError(ModvidError):
    """A mask predictor returned something other than a same-shape binary mask."""


class NumericalFailure(ModvidError):
    """A numeric computation produced NaN/Inf where finite values are required."""


class TrainingFailure(NumericalFailure):
    """Training diverged; carries step diagnostics in the message."""


class FormatError(ModvidError):
    """A file payload could not be parsed.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ValidationError(ModvidError):
    """A manifest or dataset is internally inconsistent."""
