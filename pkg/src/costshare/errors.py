"""Exception hierarchy.

The CLI maps these onto process exit codes: ConfigError -> 2,
EngineInvariantError (and its ClosureViolationError subclass) -> 3,
VerificationError -> 4.
"""


class CostshareError(Exception):
    """Base class for everything raised deliberately by this package."""


class ConfigError(CostshareError):
    """Malformed configuration, instance file, or schedule."""


class MetricError(ConfigError):
    """Input data does not describe a metric (symmetry/positivity/triangle)."""


class EngineInvariantError(CostshareError):
    """An internal invariant the theory guarantees was observed to fail.

    This is always a bug somewhere -- either in the engine or in the theory --
    and is never downgraded to a warning.
    """


class ClosureViolationError(EngineInvariantError):
    """A state left the four-class hierarchy, or a move broke its class contract."""

    def __init__(self, message, *, details=None):
        super().__init__(message)
        self.details = details or {}


class VerificationError(CostshareError):
    """A snapshot or replay failed independent re-verification."""
