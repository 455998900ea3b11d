"""Exception types shared across the package.

Every error raised on purpose by this package derives from Mf2fError so
callers (and the CLI) can distinguish our failures from genuine bugs.
"""


class Mf2fError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(Mf2fError):
    """An array argument has the wrong rank or an incompatible axis length.

    The message always names the offending argument and axis.
    """


class ContractError(Mf2fError):
    """An API was used out of order (e.g. backward twice on one tape, or an
    optimizer step before any gradient was produced)."""


class DegenerateDistributionError(Mf2fError):
    """A residual histogram has no spread, so no threshold can be estimated."""


class EmptySupportError(Mf2fError):
    """A masked loss has no unmasked pixels left to average over."""


class ScheduleError(Mf2fError):
    """A per-frame noise schedule does not partition the frame range."""


class ConfigError(Mf2fError):
    """A config file or checkpoint header is malformed or inconsistent."""


class NumericError(Mf2fError):
    """A computation produced non-finite values (diverged optimizer etc.)."""
