"""Project lifecycle: the five-call flow behind the CLI.

A project is a directory under the store root holding everything one
pipeline deployment needs: an object store with reference/results/staging
buckets, per-job event logs, per-task work disks, the optimized-parameters
file, and a small record that survives teardown so costs stay auditable.

    workflow = load_job_file("pipeline.workflow", catalog)
    env = create_architecture(workflow, config, project_id="demo", store_root=root)
    rec = find_optimized_param(workflow, env, config, samples_path="samples.txt")
    report, costs = run_pipeline(workflow, env, config, rec, samples_path="samples.txt")
    remove_project(env.project_id, store_root=root)        # record preserved
"""

from __future__ import annotations

import json
import logging
import re
import secrets
import shutil
from dataclasses import dataclass, field
from datetime import datetime, timezone
from fractions import Fraction
from pathlib import Path

from .backends import (
    ExecutionOutcome,
    JobReport,
    LocalBackend,
    SimBackend,
    StepOutcome,
    WorkloadSpec,
    run_job,
)
from .catalog import MachineCatalog, builtin_catalog_path, load_catalog, parse_machine_name
from .errors import (
    AlreadyExists,
    GflowError,
    LifecycleError,
    UnknownProject,
    ValidationFailed,
)
from .optimizer import (
    DEFAULT_HEADROOM,
    DEFAULT_TEST_SAMPLES,
    CostReport,
    Recommendation,
    job_cost_report,
    profile,
    recommend,
)
from .orchestrator import Job, parse_sample_file
from .rational import frac_str, round_cents, to_frac
from .store import ObjectStore, StoreUri
from .workflow import ResourceRequest, Workflow, compile_task, parse_workflow, validate_workflow

log = logging.getLogger(__name__)

_PROJECT_ID_RE = re.compile(r"^[a-z0-9][a-z0-9-]{1,40}$")

MANIFEST = "project.json"
RECORD = "record.json"
OPTPARAMS = "optparams.json"
TEST_RUN = "test_run.json"


@dataclass(frozen=True)
class EngineConfig:
    """Engine knobs with safe defaults; everything has a flag override."""

    backend: str = "sim"
    capacity: dict[str, int] = field(default_factory=dict)
    default_capacity: int = 2
    max_retries: int = 3
    headroom: str | Fraction = DEFAULT_HEADROOM
    lease_hours: int = 24
    default_machine: str = "e2-standard-16"
    default_disk_gb: int = 500
    default_disk_class: str = "standard"
    test_samples: int = DEFAULT_TEST_SAMPLES
    step_timeout: float | None = None
    runner_template: str | None = None
    fsync: bool = False

    def __post_init__(self):
        if self.backend not in ("sim", "local"):
            raise GflowError(f"unknown backend {self.backend!r} (want sim or local)")
        parse_machine_name(self.default_machine)
        if any(c < 1 for c in self.capacity.values()) or self.default_capacity < 1:
            raise GflowError("pool capacities must be >= 1")
        if self.max_retries < 0:
            raise GflowError("max_retries must be >= 0")

    def default_request(self) -> ResourceRequest:
        return ResourceRequest(
            machine=self.default_machine,
            disk_gb=self.default_disk_gb,
            disk_class=self.default_disk_class,
        )

    def capacity_for(self, machine: str) -> int:
        return int(self.capacity.get(machine, self.default_capacity))


@dataclass(frozen=True)
class ProjectEnv:
    project_id: str
    store_root: Path            # base directory holding all projects
    buckets: dict[str, str]     # reference / results / staging bucket names
    event_log_dir: Path
    catalog_path: Path
    created_at: str

    @property
    def root(self) -> Path:
        return Path(self.store_root) / self.project_id

    @property
    def object_store_root(self) -> Path:
        return self.root / "store"

    def store(self) -> ObjectStore:
        return ObjectStore(self.object_store_root)

    def log_path(self, job_id: str) -> Path:
        return Path(self.event_log_dir) / f"{job_id}.jsonl"

    def bucket_uri(self, kind: str) -> StoreUri:
        return StoreUri(self.buckets[kind])

    @property
    def optparams_path(self) -> Path:
        return self.root / OPTPARAMS

    def to_dict(self) -> dict:
        return {
            "project_id": self.project_id,
            "store_root": str(self.store_root),
            "buckets": dict(self.buckets),
            "event_log_dir": str(self.event_log_dir),
            "catalog_path": str(self.catalog_path),
            "created_at": self.created_at,
        }


# ---------------------------------------------------------------------------
# lifecycle operations


def load_job_file(path: str | Path, catalog: MachineCatalog | None = None) -> Workflow:
    """Parse and validate a workflow file; diagnostics cite file and line."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    name = path.stem
    workflow = parse_workflow(text, name=name)
    workflow = Workflow(**{**workflow.__dict__, "source_dir": str(path.parent)})
    diagnostics = validate_workflow(workflow, catalog)
    if diagnostics:
        raise ValidationFailed(diagnostics, filename=str(path))
    return workflow


def create_architecture(
    workflow: Workflow,
    config: EngineConfig,
    *,
    project_id: str,
    store_root: str | Path,
    catalog_path: str | Path | None = None,
) -> ProjectEnv:
    """Provision the project directory tree and its three buckets.

    A local `referencefile` path is uploaded into the reference bucket (the
    bucket name carries a random suffix); a remote reference location is kept
    as metadata only. Fails with AlreadyExists for a live project ID.
    """
    if not _PROJECT_ID_RE.match(project_id):
        raise GflowError(f"project id {project_id!r} must match {_PROJECT_ID_RE.pattern}")
    store_root = Path(store_root)
    root = store_root / project_id
    if (root / MANIFEST).exists():
        raise AlreadyExists(f"project {project_id!r} already exists under {store_root}")
    ref_bucket = f"{project_id}-ref-{secrets.token_hex(3)}"
    buckets = {
        "reference": ref_bucket,
        "results": f"{project_id}-results",
        "staging": f"{project_id}-staging",
    }
    env = ProjectEnv(
        project_id=project_id,
        store_root=store_root,
        buckets=buckets,
        event_log_dir=root / "logs",
        catalog_path=Path(catalog_path) if catalog_path else builtin_catalog_path(),
        created_at=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )
    (root / "logs").mkdir(parents=True)
    (root / "workdisks").mkdir()
    store = env.store()
    for bucket in buckets.values():
        store.create_bucket(bucket)

    if workflow.referencefile:
        ref = Path(workflow.referencefile)
        if not ref.is_absolute() and workflow.source_dir:
            candidate = Path(workflow.source_dir) / workflow.referencefile
            ref = candidate if candidate.exists() else ref
        if ref.exists():
            uri = StoreUri(ref_bucket)
            count = store.upload_tree(ref, uri) if ref.is_dir() else bool(store.upload_file(ref, uri.join(ref.name)))
            log.info("uploaded %s reference object(s) from %s", count, ref)

    (root / MANIFEST).write_text(json.dumps(env.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    _write_record(root, {"project_id": project_id, "created_at": env.created_at})
    return env


def load_project(project_id: str, store_root: str | Path) -> ProjectEnv:
    manifest = Path(store_root) / project_id / MANIFEST
    if not manifest.exists():
        raise LifecycleError(
            f"project {project_id!r} has no architecture under {store_root}; run `create` first"
        )
    data = json.loads(manifest.read_text(encoding="utf-8"))
    return ProjectEnv(
        project_id=data["project_id"],
        store_root=Path(data["store_root"]),
        buckets=data["buckets"],
        event_log_dir=Path(data["event_log_dir"]),
        catalog_path=Path(data["catalog_path"]),
        created_at=data["created_at"],
    )


def _rotate_log(path: Path) -> None:
    """Keep a previous run's event log as `<name>.N` instead of appending to it."""
    if not path.exists() or path.stat().st_size == 0:
        return
    n = 1
    while path.with_name(f"{path.name}.{n}").exists():
        n += 1
    path.rename(path.with_name(f"{path.name}.{n}"))


def _write_record(root: Path, record: dict) -> None:
    (root / RECORD).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_record(root: Path) -> dict:
    path = root / RECORD
    if not path.exists():
        raise UnknownProject(f"no record for project at {root}")
    return json.loads(path.read_text(encoding="utf-8"))


def _make_backend(env: ProjectEnv, config: EngineConfig, job_id: str,
                  catalog: MachineCatalog, workload: WorkloadSpec | None, seed: int | None):
    store = env.store()
    if config.backend == "sim":
        if workload is None:
            raise GflowError("the sim backend needs a workload spec (--workload)")
        if seed is not None:
            workload = workload.with_seed(seed)
        return SimBackend(workload, catalog, store, reference_root=str(env.bucket_uri("reference")))
    ref_uri = env.bucket_uri("reference")
    has_refs = bool(store.list_prefix(ref_uri))
    return LocalBackend(
        store=store,
        workdisk_root=env.root / "workdisks" / job_id,
        log_root=env.event_log_dir / job_id,
        ref_root=ref_uri if has_refs else None,
        step_timeout=config.step_timeout,
        runner_template=config.runner_template,
    )


def _pools_for(plan_machines: list[str | None], config: EngineConfig, backend_name: str) -> dict[str, int]:
    if backend_name == "local":
        return {"local": config.default_capacity}
    pools: dict[str, int] = {}
    for machine in plan_machines:
        if machine:
            pools.setdefault(machine, config.capacity_for(machine))
    return pools


def find_optimized_param(
    workflow: Workflow,
    env: ProjectEnv,
    config: EngineConfig,
    *,
    samples_path: str | Path,
    workload: WorkloadSpec | None = None,
    seed: int | None = None,
) -> Recommendation:
    """Test-run a sample subset under defaults, then write optimized parameters.

    The subset size is the workflow's `testsamplesize` when set, else the
    engine default. Test results land in the results bucket, and the observed
    outcomes are recorded so the full run can reuse them instead of
    recomputing.
    """
    catalog = load_catalog(env.catalog_path)
    sample_ids = tuple(parse_sample_file(samples_path))
    defaults = config.default_request()
    job = Job(
        job_id=f"{workflow.name}-optimize",
        workflow=workflow,
        sample_ids=sample_ids,
        defaults=defaults,
        max_retries=config.max_retries,
        result_root=str(env.bucket_uri("results")),
    )
    n_test = workflow.testsamplesize or config.test_samples
    if n_test > len(sample_ids):
        log.warning("testsamplesize %d exceeds %d samples; clamping", n_test, len(sample_ids))
        n_test = len(sample_ids)
    backend = _make_backend(env, config, f"{job.job_id}-test", catalog, workload, seed)
    pools = _pools_for([defaults.machine], config, config.backend)
    test_log = env.log_path(f"{job.job_id}-test")
    _rotate_log(test_log)
    prof, test_report = profile(job, n_test, defaults, backend, pools, test_log)
    disk_classes = {r.name: (r.resources.disk_class if r.resources else None) for r in workflow.rules}
    rec = recommend(prof, catalog, to_frac(str(config.headroom)), disk_classes)
    rec.save(env.optparams_path)
    _save_test_run(env, test_report)
    return rec


def _save_test_run(env: ProjectEnv, report: JobReport) -> None:
    outcomes = {}
    for sample_id, outcome in report.outcomes().items():
        if outcome.succeeded:
            outcomes[sample_id] = outcome.to_dict()
    payload = {"job_id": report.job_id, "outcomes": outcomes}
    (env.root / TEST_RUN).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _outcome_from_dict(data: dict) -> ExecutionOutcome:
    steps = tuple(
        StepOutcome(
            rule=s["step"],
            duration_hours=Fraction(str(s["duration_hours"])),
            exit_status=int(s.get("exit_status", 0)),
            peak_cpu_cores=Fraction(str(s.get("peaks", {}).get("cpu", "0"))),
            peak_mem_gb=Fraction(str(s.get("peaks", {}).get("mem_gb", "0"))),
            peak_disk_gb=Fraction(str(s.get("peaks", {}).get("disk_gb", "0"))),
            machine=s.get("machine"),
            disk_gb=s.get("disk_gb"),
            disk_class=s.get("disk_class"),
            failure_reason=s.get("failure_reason"),
        )
        for s in data.get("steps", [])
    )
    return ExecutionOutcome(
        sample_id=data["sample_id"],
        attempt=int(data.get("attempt", 1)),
        steps=steps,
        succeeded=bool(data.get("succeeded")),
        failed_step=data.get("failed_step"),
        failure_reason=data.get("failure_reason"),
    )


def _load_reusable_outcomes(env: ProjectEnv, sample_ids: tuple[str, ...]) -> dict[str, ExecutionOutcome]:
    path = env.root / TEST_RUN
    if not path.exists():
        return {}
    data = json.loads(path.read_text(encoding="utf-8"))
    store = env.store()
    results = env.bucket_uri("results")
    reusable = {}
    for sample_id, outcome in data.get("outcomes", {}).items():
        if sample_id in sample_ids and store.list_prefix(results.join(sample_id)):
            reusable[sample_id] = _outcome_from_dict(outcome)
    return reusable


def run_pipeline(
    workflow: Workflow,
    env: ProjectEnv,
    config: EngineConfig,
    optparams: Recommendation | None = None,
    *,
    samples_path: str | Path,
    workload: WorkloadSpec | None = None,
    seed: int | None = None,
    resume: bool = False,
) -> tuple[JobReport, CostReport]:
    """Run the full sample list and produce the cost report.

    With optimized parameters every step runs on its recommended machine and
    disk; without them steps fall back to the engine defaults. Samples whose
    results already exist from the test run are reused, not recomputed. The
    final cost summary is persisted into the project record so it outlives a
    teardown.
    """
    catalog = load_catalog(env.catalog_path)
    sample_ids = tuple(parse_sample_file(samples_path))
    defaults = config.default_request()
    job = Job(
        job_id=f"{workflow.name}-run",
        workflow=workflow,
        sample_ids=sample_ids,
        defaults=defaults,
        max_retries=config.max_retries,
        result_root=str(env.bucket_uri("results")),
    )
    backend = _make_backend(env, config, job.job_id, catalog, workload, seed)
    resources = optparams.resource_map() if optparams else None
    probe = compile_task(workflow, sample_ids[0], defaults, backend.reference_root_for(sample_ids[0]))
    machines = [
        (resources[s.rule_name].machine if resources and s.rule_name in resources else s.resources.machine)
        for s in probe.steps
    ]
    pools = _pools_for(machines, config, config.backend)
    skip = _load_reusable_outcomes(env, sample_ids)
    log_path = env.log_path(job.job_id)
    if not resume:
        _rotate_log(log_path)
    report = run_job(
        job,
        backend,
        pools,
        log_path,
        resources=resources,
        skip_completed=skip,
        resume=resume,
        fsync=config.fsync,
    )
    costs = job_cost_report(report, optparams or defaults, catalog)
    record = _read_record(env.root)
    record["last_job"] = job.job_id
    record["results"] = str(env.bucket_uri("results"))
    record["cost"] = {
        "aggregate": frac_str(costs.aggregate),
        "aggregate_rendered": str(round_cents(costs.aggregate)),
        "mean_per_sample": frac_str(costs.mean_per_sample),
        "mean_per_sample_rendered": str(round_cents(costs.mean_per_sample)),
        "currency": costs.currency,
        "samples": len(costs.samples),
    }
    _write_record(env.root, record)
    return report, costs


def project_cost(project_id: str, store_root: str | Path) -> dict:
    """Cost summary from the preserved record (works after teardown)."""
    root = Path(store_root) / project_id
    if not root.exists():
        raise UnknownProject(f"unknown project {project_id!r} under {store_root}")
    return _read_record(root)


def remove_project(project_id: str, store_root: str | Path, *, all: bool = False) -> dict:
    """Tear the project down.

    With all=False the buckets, event logs, and architecture manifest go away
    but the project record (id, creation time, final cost summary) is kept so
    `cost` queries still answer. With all=True the record goes too.
    """
    root = Path(store_root) / project_id
    if not (root / MANIFEST).exists():
        raise UnknownProject(f"unknown project {project_id!r} under {store_root}")
    removed = []
    if all:
        shutil.rmtree(root)
        removed.append(str(root))
        return {"project_id": project_id, "removed": removed, "record_preserved": False}
    for name in ("store", "logs", "workdisks", OPTPARAMS, TEST_RUN, MANIFEST):
        target = root / name
        if target.is_dir():
            shutil.rmtree(target)
            removed.append(str(target))
        elif target.exists():
            target.unlink()
            removed.append(str(target))
    return {"project_id": project_id, "removed": removed, "record_preserved": True}
