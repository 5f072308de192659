"""Exception hierarchy shared across the package.

Every error raised by library code derives from RobusError, so the
command-line layer can map failure classes to distinct exit codes.
"""


class RobusError(Exception):
    """Base class for all package errors."""


class ValidationError(RobusError):
    """A value object violates one of its invariants."""


class FrameMismatchError(RobusError):
    """Two transforms or clouds disagree about coordinate frames."""

    def __init__(self, inner: str, outer: str, context: str = "compose"):
        self.inner = inner
        self.outer = outer
        super().__init__(
            f"frame mismatch in {context}: expected frame {outer!r} but got {inner!r}"
        )


class EmptyInputError(RobusError):
    """An operation received an empty cloud, mask, or stream."""


class DegenerateInputError(RobusError):
    """Input is non-empty but geometrically degenerate for the operation."""


class InsufficientDataError(RobusError):
    """Too few samples/poses/pairs to solve the problem."""


class NoCorrespondencesError(RobusError):
    """All candidate point pairs were rejected."""


class NoOverlapError(RobusError):
    """Volumes do not overlap enough for a similarity to be meaningful."""


class OutOfBoundsError(RobusError):
    """A start point or parameter lies outside the allowed search bounds."""


class SweepAbortError(RobusError):
    """A robotic sweep had to stop (excessive force or unreachable pose)."""


class ConfigError(RobusError):
    """Pipeline configuration is missing, malformed, or inconsistent."""


class FileFormatError(RobusError):
    """An on-disk artifact could not be parsed."""
