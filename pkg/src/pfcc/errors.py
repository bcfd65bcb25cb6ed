"""Exception hierarchy shared across the package.

Each public failure mode gets its own class so the CLI can map them to
distinct exit codes (see ``pfcc.cli``).
"""

from __future__ import annotations


class PfccError(Exception):
    """Base class for all package-specific errors."""


class SchemaError(PfccError):
    """A scenario file failed parsing or structural validation."""


class AssumptionError(PfccError):
    """A structural assumption required by the control design is violated."""


class RegulationError(AssumptionError):
    """A state regulation equation S = A + B*U has no solution."""


class PersistentExcitationError(PfccError):
    """Collected data is not rich enough for the requested regression.

    Raised when a regression matrix is rank deficient under the strict
    rank policy; the fix is more samples or stronger exploration noise.
    """


class DataConsistencyError(PersistentExcitationError):
    """The window is not consistent with any time-invariant linear model.

    Typically means samples were collected while the observers feeding the
    augmented state were still in their transient; the fix is to flush the
    window and re-collect once they settle.
    """


class ConvergenceError(PfccError):
    """An iterative solver failed to converge within its iteration budget."""


class ConsistencyError(PfccError):
    """An internal invariant was violated (indicates a bug or bad input)."""


class InfluenceError(PfccError):
    """An observer or gain was requested for a leader outside an agent's
    influential set."""


class SimulationAbort(PfccError):
    """A mid-run failure, annotated with the tick and agent where it occurred."""

    def __init__(self, tick: int, agent: str, cause: Exception):
        self.tick = tick
        self.agent = agent
        self.cause = cause
        super().__init__(f"tick {tick}, agent {agent}: {cause}")
