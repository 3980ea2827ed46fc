"""Exception hierarchy for gflow.

Every error raised by the package derives from GflowError so callers can
catch broadly; the CLI maps subtrees onto stable exit codes.
"""

from __future__ import annotations


class GflowError(Exception):
    """Base class for all gflow errors."""


# ---------------------------------------------------------------------------
# workflow language


class WorkflowSyntaxError(GflowError):
    """Malformed workflow source. Carries 1-based line/column when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        loc = ""
        if line is not None:
            loc = f"line {line}" + (f", column {column}" if column is not None else "")
            loc = f" ({loc})"
        super().__init__(f"{message}{loc}")


class DuplicateRule(WorkflowSyntaxError):
    pass


class UnknownKeyword(WorkflowSyntaxError):
    pass


class MissingCommand(WorkflowSyntaxError):
    """Rule declares neither `shell` nor `script`."""


class BothCommands(WorkflowSyntaxError):
    """Rule declares both `shell` and `script`."""


class ValidationFailed(GflowError):
    """Workflow failed semantic validation; carries the diagnostics."""

    def __init__(self, diagnostics, filename: str | None = None):
        self.diagnostics = list(diagnostics)
        rendered = "\n".join(d.render(filename) for d in self.diagnostics)
        super().__init__(f"workflow validation failed:\n{rendered}")


class CompileError(GflowError):
    pass


class UnresolvedInput(CompileError):
    """An input path matches no rule output and is neither external nor staged."""


class CycleError(CompileError):
    pass


# ---------------------------------------------------------------------------
# machine catalog


class CatalogError(GflowError):
    pass


class MalformedName(CatalogError):
    pass


class UnsupportedSeries(CatalogError):
    pass


class UnknownFamily(CatalogError):
    pass


class CatalogParseError(CatalogError):
    pass


class InconsistentShape(CatalogError):
    """Declared memory disagrees with the family ratio and no override was set."""


class DuplicateMachine(CatalogError):
    pass


class UnknownDiskClass(CatalogError):
    pass


# ---------------------------------------------------------------------------
# object store


class StoreError(GflowError):
    pass


class NoSuchBucket(StoreError):
    pass


class NoSuchPrefix(StoreError):
    pass


class DiskFull(StoreError):
    """Staging would exceed the provisioned disk size."""


class IoFailure(StoreError):
    pass


# ---------------------------------------------------------------------------
# orchestrator


class OrchestratorError(GflowError):
    pass


class EmptySampleList(OrchestratorError):
    pass


class DuplicateSampleId(OrchestratorError):
    pass


class UnknownSample(OrchestratorError):
    pass


class NotInFlight(OrchestratorError):
    pass


class UnknownJob(OrchestratorError):
    pass


class CorruptLog(OrchestratorError):
    """Event log holds a malformed record.

    The valid prefix is still recovered and attached as `recovered`
    (controller state) together with the 1-based line of the bad record.
    """

    def __init__(self, message: str, line: int, recovered=None):
        self.line = line
        self.recovered = recovered
        super().__init__(f"{message} (record {line})")


# ---------------------------------------------------------------------------
# backends


class BackendError(GflowError):
    pass


class IncompleteSpec(BackendError):
    """Workload spec lacks an entry for a rule in the plan."""


class SpawnFailure(BackendError):
    pass


class Timeout(BackendError):
    pass


class DiskQuotaExceeded(BackendError):
    pass


# ---------------------------------------------------------------------------
# cost optimizer


class OptimizerError(GflowError):
    pass


class AllTestTasksFailed(OptimizerError):
    """No successful observation for at least one rule during the test run."""


class NoFeasibleMachine(OptimizerError):
    def __init__(self, rule: str, constraint: str, message: str | None = None):
        self.rule = rule
        self.constraint = constraint
        super().__init__(message or f"no feasible machine for rule {rule!r} (binding constraint: {constraint})")


class MissingDuration(OptimizerError):
    pass


class NonpositiveBaseline(OptimizerError):
    pass


# ---------------------------------------------------------------------------
# project lifecycle


class ProjectError(GflowError):
    pass


class AlreadyExists(ProjectError):
    pass


class UnknownProject(ProjectError):
    pass


class LifecycleError(ProjectError):
    """Operation invoked out of lifecycle order (e.g. run before create)."""
