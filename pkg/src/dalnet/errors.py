"""Exception types shared across the package."""


class DalnetError(Exception):
    """Base class for all package errors."""


class DimensionError(DalnetError, ValueError):
    """Tensor shapes do not agree."""


class ConfigurationError(DalnetError, ValueError):
    """A layer or network is wired or configured inconsistently."""


class DomainError(DalnetError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class UsageError(DalnetError, RuntimeError):
    """An API was called out of order."""


class FormatError(DalnetError, ValueError):
    """A file does not follow its on-disk format.

    ``offset`` is the byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


class TrainingDiverged(DalnetError, RuntimeError):
    """The training loss became non-finite."""
