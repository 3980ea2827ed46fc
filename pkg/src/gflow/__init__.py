"""gflow: queue-fed workflow engine with cluster simulation and cost optimization.

The embeddable API mirrors the CLI lifecycle:

    import gflow

    workflow = gflow.load_job_file("pipeline.workflow")
    env = gflow.create_architecture(workflow, config, project_id="demo", store_root=".gflow")
    params = gflow.find_optimized_param(workflow, env, config, samples_path="samples.txt")
    report, costs = gflow.run_pipeline(workflow, env, config, params, samples_path="samples.txt")
    gflow.remove_project("demo", ".gflow")
"""

from .backends import (
    ExecutionOutcome,
    JobReport,
    LocalBackend,
    SimBackend,
    VirtualClock,
    WorkloadSpec,
    run_job,
    run_task_local,
    run_task_sim,
)
from .catalog import MachineCatalog, MachineType, feasible_machines, load_catalog, parse_machine_name
from .optimizer import (
    CostReport,
    Recommendation,
    ResourceProfile,
    compare_costs,
    estimate_task_cost,
    job_cost_report,
    load_recommendation,
    profile,
    recommend,
)
from .orchestrator import (
    Controller,
    Job,
    JobStatus,
    QueueState,
    TaskRecord,
    TaskState,
    job_status,
    parse_sample_file,
    recover,
    submit_job,
)
from .project import (
    EngineConfig,
    ProjectEnv,
    create_architecture,
    find_optimized_param,
    load_job_file,
    load_project,
    project_cost,
    remove_project,
    run_pipeline,
)
from .store import ObjectStore, StoreUri
from .workflow import (
    ResourceRequest,
    Rule,
    TaskPlan,
    Workflow,
    compile_task,
    parse_workflow,
    serialize_workflow,
    validate_workflow,
)

__version__ = "0.1.0"

__all__ = [
    "Controller",
    "CostReport",
    "EngineConfig",
    "ExecutionOutcome",
    "Job",
    "JobReport",
    "JobStatus",
    "LocalBackend",
    "MachineCatalog",
    "MachineType",
    "ObjectStore",
    "ProjectEnv",
    "QueueState",
    "Recommendation",
    "ResourceProfile",
    "ResourceRequest",
    "Rule",
    "SimBackend",
    "StoreUri",
    "TaskPlan",
    "TaskRecord",
    "TaskState",
    "VirtualClock",
    "Workflow",
    "WorkloadSpec",
    "compare_costs",
    "compile_task",
    "create_architecture",
    "estimate_task_cost",
    "feasible_machines",
    "find_optimized_param",
    "job_cost_report",
    "job_status",
    "load_catalog",
    "load_job_file",
    "load_project",
    "load_recommendation",
    "parse_machine_name",
    "parse_sample_file",
    "parse_workflow",
    "profile",
    "project_cost",
    "recommend",
    "recover",
    "remove_project",
    "run_job",
    "run_pipeline",
    "run_task_local",
    "run_task_sim",
    "serialize_workflow",
    "submit_job",
    "validate_workflow",
]
