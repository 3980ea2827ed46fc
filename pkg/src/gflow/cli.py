"""gflow command line.

Subcommands mirror the library lifecycle: plan, create, optimize, run,
teardown, plus status/cost/fetch for monitoring and retrieval. Every flag can
also come from a GFLOW_-prefixed environment variable or a JSON config file
(flags win over the file, the file wins over built-in defaults).

Exit codes are a stable contract for scripting: 0 success, 1 partial task
failure, 2 usage or parse error, 3 environment error.
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import project as proj
from .backends import WorkloadSpec
from .catalog import builtin_catalog_path, load_catalog
from .errors import (
    BackendError,
    CatalogError,
    CompileError,
    GflowError,
    OptimizerError,
    OrchestratorError,
    ProjectError,
    StoreError,
    ValidationFailed,
    WorkflowSyntaxError,
)
from .optimizer import load_recommendation
from .orchestrator import job_status
from .rational import format_percent
from .store import StoreUri
from .workflow import compile_task, plan_to_dict

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_USAGE = 2
EXIT_ENV = 3

_PARSE_ERRORS = (WorkflowSyntaxError, ValidationFailed, CompileError, CatalogError, OptimizerError, BackendError)
_ENV_ERRORS = (StoreError, ProjectError, OrchestratorError, OSError)


def _die(code: int, message: str) -> None:
    click.echo(f"gflow: {message}", err=True)
    sys.exit(code)


def handles_errors(f):
    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except _PARSE_ERRORS as exc:
            _die(EXIT_USAGE, str(exc))
        except _ENV_ERRORS as exc:
            _die(EXIT_ENV, str(exc))
        except GflowError as exc:
            _die(EXIT_USAGE, str(exc))

    return wrapper


@click.group()
@click.option("--store-root", type=click.Path(path_type=Path), default=Path("gflow-store"),
              show_default=True, help="Directory holding all project state.")
@click.option("--catalog", "catalog_path", type=click.Path(path_type=Path), default=None,
              help="Machine/disk price catalog (JSON); defaults to the bundled sample catalog.")
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None,
              help="JSON config file supplying defaults for any flag.")
@click.pass_context
def main(ctx, store_root, catalog_path, config_path):
    """Workflow runner with cluster simulation and cloud cost optimization."""
    file_cfg = {}
    if config_path is not None:
        try:
            file_cfg = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            _die(EXIT_USAGE, f"cannot load config {config_path}: {exc}")
    ctx.default_map = {cmd: file_cfg for cmd in main.commands}
    ctx.obj = {
        "store_root": Path(file_cfg.get("store_root", store_root)),
        "catalog_path": Path(catalog_path or file_cfg.get("catalog", builtin_catalog_path())),
        "file_cfg": file_cfg,
    }


def _engine_config(obj, **flags) -> proj.EngineConfig:
    cfg = dict(obj["file_cfg"])
    merged = {}
    for name in ("backend", "max_retries", "headroom", "default_machine", "default_disk_gb",
                 "default_disk_class", "test_samples", "step_timeout", "runner_template",
                 "default_capacity", "fsync", "lease_hours"):
        if flags.get(name) is not None:
            merged[name] = flags[name]
        elif name in cfg:
            merged[name] = cfg[name]
    capacity = cfg.get("capacity", {})
    if flags.get("capacity") is not None:
        merged["default_capacity"] = flags["capacity"]
    return proj.EngineConfig(capacity={str(k): int(v) for k, v in capacity.items()}, **merged)


def _load_workload(path, seed):
    if path is None:
        return None
    spec = WorkloadSpec.load(path)
    return spec.with_seed(seed) if seed is not None else spec


_backend_opt = click.option("--backend", type=click.Choice(["sim", "local"]), default=None,
                            help="Execution backend [default: sim].")
_samples_opt = click.option("--samples", "samples_path", type=click.Path(path_type=Path), required=True,
                            help="Sample ID list (one per line, # comments).")
_workload_opt = click.option("--workload", "workload_path", type=click.Path(path_type=Path), default=None,
                             help="Workload spec for the simulator (JSON).")
_seed_opt = click.option("--seed", type=int, default=None, help="Simulator RNG seed override.")
_retries_opt = click.option("--max-retries", type=int, default=None, help="Failover retry budget [default: 3].")
_headroom_opt = click.option("--headroom", default=None, help="Safety multiplier over observed peaks [default: 1.1].")
_capacity_opt = click.option("--capacity", type=int, default=None, help="Concurrent tasks per pool [default: 2].")
_machine_opt = click.option("--default-machine", default=None, help="Default machine type [default: e2-standard-16].")


@main.command()
@click.argument("workflow_file", type=click.Path(path_type=Path))
@click.option("--sample", default="SAMPLE1", show_default=True,
              help="Sample ID used to instantiate the plan.")
@click.pass_obj
@handles_errors
def plan(obj, workflow_file, sample):
    """Parse and validate a workflow; print the per-sample step plan as JSON."""
    catalog = load_catalog(obj["catalog_path"])
    workflow = proj.load_job_file(workflow_file, catalog)
    cfg = _engine_config(obj)
    task = compile_task(workflow, sample, cfg.default_request(), "store://reference-data")
    click.echo(json.dumps(plan_to_dict(task), indent=2, sort_keys=True))


@main.command()
@click.argument("workflow_file", type=click.Path(path_type=Path))
@click.option("--project", "project_id", required=True, help="Project identifier.")
@_machine_opt
@click.pass_obj
@handles_errors
def create(obj, workflow_file, project_id, default_machine):
    """Create the project architecture: directories, buckets, reference upload."""
    catalog = load_catalog(obj["catalog_path"])
    workflow = proj.load_job_file(workflow_file, catalog)
    cfg = _engine_config(obj, default_machine=default_machine)
    env = proj.create_architecture(
        workflow, cfg, project_id=project_id, store_root=obj["store_root"],
        catalog_path=obj["catalog_path"],
    )
    click.echo(f"created project {env.project_id} at {env.root}")
    for kind, bucket in env.buckets.items():
        click.echo(f"  {kind}: store://{bucket}")


@main.command()
@click.argument("workflow_file", type=click.Path(path_type=Path))
@click.option("--project", "project_id", required=True)
@_samples_opt
@_backend_opt
@_workload_opt
@_seed_opt
@_retries_opt
@_headroom_opt
@_capacity_opt
@_machine_opt
@click.pass_obj
@handles_errors
def optimize(obj, workflow_file, project_id, samples_path, backend, workload_path, seed,
             max_retries, headroom, capacity, default_machine):
    """Profile a test subset under defaults and write optimized parameters."""
    catalog = load_catalog(obj["catalog_path"])
    workflow = proj.load_job_file(workflow_file, catalog)
    cfg = _engine_config(obj, backend=backend, max_retries=max_retries, headroom=headroom,
                         capacity=capacity, default_machine=default_machine)
    env = proj.load_project(project_id, obj["store_root"])
    rec = proj.find_optimized_param(
        workflow, env, cfg, samples_path=samples_path,
        workload=_load_workload(workload_path, seed), seed=seed,
    )
    click.echo(f"optimized parameters written to {env.optparams_path}")
    for rule, res in rec.rules.items():
        click.echo(f"  {rule}: {res.machine}, {res.disk_gb} GB {res.disk_class}")


@main.command()
@click.argument("workflow_file", type=click.Path(path_type=Path))
@click.option("--project", "project_id", required=True)
@_samples_opt
@click.option("--optparams", "optparams_path", type=click.Path(path_type=Path), default=None,
              help="Optimized parameters file; omit to run on default resources.")
@_backend_opt
@_workload_opt
@_seed_opt
@_retries_opt
@_headroom_opt
@_capacity_opt
@_machine_opt
@click.option("--resume", is_flag=True, help="Resume an interrupted run from its event log.")
@click.pass_obj
@handles_errors
def run(obj, workflow_file, project_id, samples_path, optparams_path, backend, workload_path,
        seed, max_retries, headroom, capacity, default_machine, resume):
    """Run the pipeline over the full sample list and print the cost report."""
    catalog = load_catalog(obj["catalog_path"])
    workflow = proj.load_job_file(workflow_file, catalog)
    cfg = _engine_config(obj, backend=backend, max_retries=max_retries, headroom=headroom,
                         capacity=capacity, default_machine=default_machine)
    env = proj.load_project(project_id, obj["store_root"])
    optparams = None
    if optparams_path is not None:
        optparams = load_recommendation(optparams_path, catalog, [r.name for r in workflow.rules])
    report, costs = proj.run_pipeline(
        workflow, env, cfg, optparams, samples_path=samples_path,
        workload=_load_workload(workload_path, seed), seed=seed, resume=resume,
    )
    click.echo(costs.render_table())
    click.echo(f"results: {env.bucket_uri('results')}")
    if report.makespan_hours is not None:
        click.echo(f"makespan: {float(report.makespan_hours):.3f} h")
    if not report.all_succeeded:
        failed = [s for s, state in report.final.items() if state.value == "Exhausted"]
        click.echo(f"gflow: {len(failed)} task(s) exhausted retries: {', '.join(sorted(failed))}", err=True)
        sys.exit(EXIT_PARTIAL)


@main.command()
@click.argument("job_id")
@click.option("--project", "project_id", required=True)
@click.pass_obj
@handles_errors
def status(obj, job_id, project_id):
    """Show job progress from its event log (safe while a run is active)."""
    env = proj.load_project(project_id, obj["store_root"])
    click.echo(job_status(env.log_path(job_id)).render())


@main.command()
@click.argument("project_id")
@click.pass_obj
@handles_errors
def cost(obj, project_id):
    """Show the project's preserved cost summary (works after teardown)."""
    record = proj.project_cost(project_id, obj["store_root"])
    summary = record.get("cost")
    click.echo(f"project {record['project_id']} (created {record['created_at']})")
    if summary is None:
        click.echo("  no completed run recorded")
        return
    cur = summary.get("currency", "$")
    click.echo(f"  last job: {record.get('last_job')}")
    click.echo(f"  samples: {summary['samples']}")
    click.echo(f"  aggregate: {cur}{summary['aggregate_rendered']}")
    click.echo(f"  mean per sample: {cur}{summary['mean_per_sample_rendered']}")


@main.command()
@click.argument("source")
@click.argument("dest", type=click.Path(path_type=Path))
@click.option("--project", "project_id", default=None,
              help="Project owning the bucket; inferred from the URI when omitted.")
@click.pass_obj
@handles_errors
def fetch(obj, source, dest, project_id):
    """Download results recursively; existing destination files are never overwritten."""
    uri = StoreUri.parse(source)
    if project_id is None:
        project_id = _infer_project(obj["store_root"], uri.bucket)
    env = proj.load_project(project_id, obj["store_root"])
    report = env.store().copy_no_clobber(uri, dest)
    click.echo(f"(copied {report.copied}, skipped {report.skipped})")


def _infer_project(store_root: Path, bucket: str) -> str:
    for manifest in sorted(Path(store_root).glob(f"*/{proj.MANIFEST}")):
        data = json.loads(manifest.read_text(encoding="utf-8"))
        if bucket in data.get("buckets", {}).values():
            return data["project_id"]
    raise ProjectError(f"no project under {store_root} owns bucket {bucket!r}")


@main.command()
@click.argument("project_id")
@click.option("--all", "remove_all", is_flag=True, help="Also remove the preserved project record.")
@click.pass_obj
@handles_errors
def teardown(obj, project_id, remove_all):
    """Remove project state; without --all the cost record is preserved."""
    report = proj.remove_project(project_id, obj["store_root"], all=remove_all)
    click.echo(f"removed project {project_id}" + ("" if report["record_preserved"] else " (record included)"))


@main.command("compare")
@click.argument("baseline", type=str)
@click.argument("optimized", type=str)
@handles_errors
def compare(baseline, optimized):
    """Print the cost reduction percent between two per-sample costs."""
    from .optimizer import compare_costs

    click.echo(format_percent(compare_costs(baseline, optimized)))


def entrypoint():
    main(auto_envvar_prefix="GFLOW")


if __name__ == "__main__":
    entrypoint()
