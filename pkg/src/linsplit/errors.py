"""Exception types shared across the package."""


class LinsplitError(Exception):
    """Base class for every error raised by linsplit."""


class DimensionError(LinsplitError, ValueError):
    pass


class ConfigError(LinsplitError, ValueError):
    pass


class DataError(LinsplitError, ValueError):
    pass


class FormatError(DataError):
    """Malformed file contents (bad magic, truncation, ragged rows)."""


class UsageError(LinsplitError, RuntimeError):
    pass


class PlanError(LinsplitError, ValueError):
    """A keep plan would leave a block without any non-linear channel."""


class StructuralError(LinsplitError, ValueError):
    pass


class NumericError(LinsplitError, ArithmeticError):
    """Training produced a non-finite loss."""
