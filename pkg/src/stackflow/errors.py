"""Exception taxonomy shared across the package.

The CLI maps these onto its exit codes: configuration and dataset problems
exit 2, node failures during a run exit 1, anything unexpected exits 3.
"""

from __future__ import annotations


class StackflowError(Exception):
    """Base class for all errors raised by this package."""


class BidsError(StackflowError):
    """A BIDS path or dataset operation failed."""


class BidsParseError(BidsError):
    """A filename does not follow the key-value entity grammar."""


class DatasetError(StackflowError):
    """Dataset indexing failed (missing root, zero subjects, unreadable dir)."""


class ConfigError(StackflowError):
    """Configuration loading, composition, or validation failed."""


class OverrideError(ConfigError):
    """A config override could not be applied."""


class InterpolationError(ConfigError):
    """A ``${path}`` reference is dangling or cyclic."""


class TemplateError(StackflowError):
    """A command template placeholder is malformed, unbound, or unresolvable."""


class RuntimeUnavailableError(StackflowError):
    """The container runtime binary (or a command) is not on PATH."""


class ExecutionTimeoutError(StackflowError):
    """A child process exceeded its time budget.

    Carries the partial log paths so callers can surface them.
    """

    def __init__(self, message: str, stdout_path=None, stderr_path=None):
        super().__init__(message)
        self.stdout_path = stdout_path
        self.stderr_path = stderr_path


class GraphError(StackflowError):
    """Workflow graph construction or validation failed."""


class CycleError(GraphError):
    """The graph contains a dependency cycle.

    ``cycle`` lists the node ids along one offending cycle, first node
    repeated at the end.
    """

    def __init__(self, cycle: list[str]):
        super().__init__("dependency cycle: " + " -> ".join(cycle))
        self.cycle = cycle


class CacheLockError(StackflowError):
    """Another orchestrator process holds the cache lock."""
