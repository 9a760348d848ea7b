class HScoreError(Exception):
    """Base class for all errors raised by this package."""


class InputError(HScoreError):
    """Unreadable or malformed input (missing file, bad field, bad header)."""


class DomainError(HScoreError, ValueError):
    """Arguments violate an operation's preconditions."""


class CapacityError(DomainError):
    """A generator could not satisfy its placement constraints."""


class AlignmentError(InputError):
    """Two keypoint files disagree on which tiles exist."""

    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)
