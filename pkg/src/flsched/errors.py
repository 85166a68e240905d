"""Exception hierarchy shared across the package."""


class FlschedError(Exception):
    """Base class for all package-specific errors."""


class DomainError(FlschedError, ValueError):
    """An argument is outside the mathematical domain of an operation."""


class ConfigError(FlschedError, ValueError):
    """An experiment configuration is malformed or inconsistent."""


class InfeasibleError(FlschedError, ValueError):
    """A requested schedule, batch size, or search space is infeasible."""


class DeadlineTooShortError(InfeasibleError):
    """A round deadline does not exceed a client's communication time."""


class InfeasibleBatchError(InfeasibleError):
    """The batch-size rule would produce a batch smaller than one sample."""


class TruncationConstraintError(InfeasibleError):
    """The no-contributor probability constraint is violated, making the
    truncation-variance term undefined."""


class SingularTaskError(FlschedError, ValueError):
    """A synthetic task's per-user objective is degenerate."""
