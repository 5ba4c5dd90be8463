"""Exception hierarchy shared by every module."""


class DMPError(Exception):
    """Base class for all package errors."""


class ConfigurationError(DMPError, ValueError):
    """Shapes, layouts or configuration values that cannot work together."""


class UsageError(DMPError, ValueError):
    """An API was called out of contract (e.g. backward on a non-scalar)."""


class NonFiniteError(DMPError, FloatingPointError):
    """An operation produced NaN or Inf."""

    def __init__(self, op, detail=""):
        self.op = op
        msg = f"non-finite value produced by op '{op}'"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)


class FormatError(DMPError, ValueError):
    """A file could not be parsed. ``offset`` is the byte offset of the fault."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class InputError(DMPError, ValueError):
    """User-supplied data (images, files) is unusable."""


class DegenerateInputError(InputError):
    """No valid positions remain to evaluate a loss or metric on."""


class UndefinedMetricError(DegenerateInputError):
    """A metric was requested over an empty mask."""
