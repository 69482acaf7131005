"""Exception types shared across the package."""


class HpnError(Exception):
    """Base class for package errors."""


class DimensionError(HpnError, ValueError):
    """Tensor or volume extents are incompatible."""


class ContractError(HpnError, ValueError):
    """A documented precondition was violated."""


class ConfigurationError(HpnError, ValueError):
    """A configuration cannot be realised (bad depth, empty split, ...)."""


class FormatError(HpnError, IOError):
    """Malformed volume file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset
