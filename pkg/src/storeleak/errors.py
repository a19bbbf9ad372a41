"""Exception types shared across the simulator and the attack layers.

The CLI maps these onto exit codes: configuration problems exit 1,
attack-infeasible conditions exit 2.
"""


class StoreleakError(Exception):
    """Base class for all package errors."""


class InvalidConfigError(StoreleakError):
    """A configuration value or preset name is invalid."""


class OutOfMemoryError(StoreleakError):
    """The simulated physical memory cannot satisfy an allocation."""


class PageFaultError(StoreleakError):
    """Translation was requested for an unmapped virtual page."""


class ScanBudgetError(StoreleakError):
    """An aliasing scan ran out of candidate pages before reaching its target."""


class InsufficientPoolError(StoreleakError):
    """A candidate pool is too small for the requested eviction-set search."""


class SearchAbortedError(StoreleakError):
    """An eviction-set search exceeded its test budget."""


class AttackInfeasibleError(StoreleakError):
    """Preconditions for an end-to-end attack do not hold (e.g. no contiguous memory)."""


class UndefinedCorrelationError(StoreleakError):
    """Pearson correlation is undefined (zero variance or too few samples)."""
