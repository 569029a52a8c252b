"""Exception types shared across the package."""


class AudiocapError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(AudiocapError, ValueError):
    """Tensor shapes are inconsistent with an operation's contract."""


class ArgumentError(AudiocapError, ValueError):
    """An argument value is outside its allowed domain."""


class RangeError(AudiocapError, IndexError):
    """An index or token id is out of range."""


class ContractError(AudiocapError, RuntimeError):
    """An operation was invoked in a state its contract forbids."""


class FormatError(AudiocapError, ValueError):
    """A file or byte stream does not match its declared format."""


class TransferError(AudiocapError, ValueError):
    """Pretrained parameters cannot be transferred into the target model."""


class DataError(AudiocapError, ValueError):
    """A dataset record is missing or carries invalid fields."""


class InputError(AudiocapError, ValueError):
    """An input collection or signal does not satisfy a precondition."""
