"""Resource profiling, machine recommendation, and billing estimation.

The optimizer closes the loop that makes large runs affordable: run a small
test subset under generous default resources, record what each rule actually
used, then pick the cheapest machine shape and disk that fit the observed
peaks (times a safety headroom) for the full run.

All money math is exact rational arithmetic; figures are rounded half-up to
cents only when a report is rendered.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from decimal import Decimal
from fractions import Fraction
from pathlib import Path

from .backends import ExecutionOutcome, JobReport, run_job
from .catalog import DISK_CLASSES, MachineCatalog, MachineType, feasible_machines, parse_machine_name
from .errors import (
    AllTestTasksFailed,
    MissingDuration,
    NoFeasibleMachine,
    NonpositiveBaseline,
    OptimizerError,
)
from .orchestrator import Job
from .rational import format_money, format_percent, frac_str, round_cents, to_frac
from .workflow import ResourceRequest

log = logging.getLogger(__name__)

DEFAULT_HEADROOM = Fraction("1.1")
DEFAULT_TEST_SAMPLES = 3
DISK_GRANULARITY_GB = 10


# ---------------------------------------------------------------------------
# profile


@dataclass(frozen=True)
class RuleUsage:
    """Worst observed peaks and mean duration for one rule across test samples."""

    peak_cpu_cores: Fraction
    peak_mem_gb: Fraction
    peak_disk_gb: Fraction
    mean_duration_hours: Fraction
    samples: int


@dataclass(frozen=True)
class ResourceProfile:
    rules: dict[str, RuleUsage]

    def to_dict(self) -> dict:
        return {
            rule: {
                "peak_cpu_cores": frac_str(u.peak_cpu_cores),
                "peak_mem_gb": frac_str(u.peak_mem_gb),
                "peak_disk_gb": frac_str(u.peak_disk_gb),
                "mean_duration_hours": frac_str(u.mean_duration_hours),
                "samples": u.samples,
            }
            for rule, u in self.rules.items()
        }


def aggregate_profile(attempts: list[ExecutionOutcome], rule_names: list[str]) -> ResourceProfile:
    """Max peaks and mean duration over successful step observations."""
    peaks: dict[str, dict] = {}
    for attempt in attempts:
        for step in attempt.steps:
            if not step.ok:
                continue
            entry = peaks.setdefault(step.rule, {"cpu": Fraction(0), "mem": Fraction(0),
                                                 "disk": Fraction(0), "durations": []})
            entry["cpu"] = max(entry["cpu"], step.peak_cpu_cores)
            entry["mem"] = max(entry["mem"], step.peak_mem_gb)
            entry["disk"] = max(entry["disk"], step.peak_disk_gb)
            entry["durations"].append(step.duration_hours)
    missing = [r for r in rule_names if r not in peaks]
    if missing:
        raise AllTestTasksFailed(
            f"no successful test observation for rule(s): {', '.join(missing)}; "
            "try a larger default machine"
        )
    rules = {}
    for rule in rule_names:
        entry = peaks[rule]
        durations = entry["durations"]
        rules[rule] = RuleUsage(
            peak_cpu_cores=entry["cpu"],
            peak_mem_gb=entry["mem"],
            peak_disk_gb=entry["disk"],
            mean_duration_hours=sum(durations, Fraction(0)) / len(durations),
            samples=len(durations),
        )
    return ResourceProfile(rules=rules)


def profile(
    job: Job,
    n_test: int,
    defaults: ResourceRequest,
    backend,
    pools: dict[str, int],
    log_path: str | Path,
) -> tuple[ResourceProfile, JobReport]:
    """Run the first `n_test` samples under default resources and aggregate usage.

    Returns the profile together with the test-run report (whose results are
    already in the result store, so the full run can reuse them).
    """
    if n_test < 1:
        raise OptimizerError("test sample count must be >= 1")
    if n_test > len(job.sample_ids):
        log.warning("test sample count %d exceeds %d available samples; clamping",
                    n_test, len(job.sample_ids))
        n_test = len(job.sample_ids)
    test_job = Job(
        job_id=f"{job.job_id}-test",
        workflow=job.workflow,
        sample_ids=job.sample_ids[:n_test],
        defaults=defaults,
        max_retries=job.max_retries,
        result_root=job.result_root,
    )
    report = run_job(test_job, backend, pools, log_path)
    rule_names = [r.name for r in job.workflow.rules]
    return aggregate_profile(report.attempts, rule_names), report


# ---------------------------------------------------------------------------
# recommend


@dataclass(frozen=True)
class StepResources:
    machine: str
    disk_gb: int
    disk_class: str

    def as_request(self) -> ResourceRequest:
        return ResourceRequest(machine=self.machine, disk_gb=self.disk_gb, disk_class=self.disk_class)


@dataclass(frozen=True)
class Recommendation:
    """Optimized per-rule machine and disk choices (the tuning artifact)."""

    rules: dict[str, StepResources]
    headroom: Fraction = DEFAULT_HEADROOM

    def resource_map(self) -> dict[str, ResourceRequest]:
        return {rule: res.as_request() for rule, res in self.rules.items()}

    def to_dict(self) -> dict:
        return {
            "headroom": frac_str(self.headroom),
            "rules": {
                rule: {"machine": r.machine, "disk_gb": r.disk_gb, "disk_class": r.disk_class}
                for rule, r in self.rules.items()
            },
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_recommendation(path: str | Path, catalog: MachineCatalog | None = None,
                        rule_names: list[str] | None = None) -> Recommendation:
    """Load and validate an optimized-parameters file (hand edits included)."""
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"), parse_float=Decimal)
    except (OSError, json.JSONDecodeError) as exc:
        raise OptimizerError(f"cannot load optimized parameters from {path}: {exc}") from exc
    rules = {}
    for rule, entry in data.get("rules", {}).items():
        if rule_names is not None and rule not in rule_names:
            raise OptimizerError(f"optimized parameters name unknown rule {rule!r}")
        machine = entry.get("machine")
        parse_machine_name(machine)  # series/family/shape must be valid
        if catalog is not None and not catalog.has_machine(machine):
            raise OptimizerError(f"machine {machine!r} for rule {rule!r} is not in the catalog")
        disk_gb = entry.get("disk_gb")
        if not isinstance(disk_gb, int) or disk_gb < DISK_GRANULARITY_GB:
            raise OptimizerError(f"rule {rule!r}: disk_gb must be an integer >= {DISK_GRANULARITY_GB}")
        disk_class = entry.get("disk_class", "balanced")
        if disk_class not in DISK_CLASSES:
            raise OptimizerError(f"rule {rule!r}: unknown disk class {disk_class!r}")
        rules[rule] = StepResources(machine, disk_gb, disk_class)
    if not rules:
        raise OptimizerError(f"{path} holds no per-rule resources")
    return Recommendation(rules=rules, headroom=to_frac(str(data.get("headroom", "1.1"))))


def _binding_constraint(catalog: MachineCatalog, need_cpu: Fraction, need_mem: Fraction) -> str:
    mem_alone = feasible_machines(catalog, 0, need_mem)
    cpu_alone = feasible_machines(catalog, need_cpu, 0)
    if not mem_alone:
        return "memory"
    if not cpu_alone:
        return "cpu"
    return "cpu+memory"


def recommend(
    p: ResourceProfile,
    catalog: MachineCatalog,
    headroom: Fraction | str | float = DEFAULT_HEADROOM,
    disk_classes: dict[str, str | None] | None = None,
) -> Recommendation:
    """Cheapest feasible machine and disk per rule, at headroom-scaled peaks.

    The machine is the first element of the price-sorted feasible list
    (deterministic tie-break by price, then vCPU, then name). Disk is the
    scaled peak rounded up to 10 GB granularity, minimum 10 GB; the disk
    class keeps the rule's requested class, defaulting to balanced.
    """
    headroom = to_frac(str(headroom) if isinstance(headroom, float) else headroom)
    if headroom < 1:
        raise OptimizerError("headroom must be >= 1")
    rules = {}
    for rule, usage in p.rules.items():
        need_cpu = usage.peak_cpu_cores * headroom
        need_mem = usage.peak_mem_gb * headroom
        need_disk = usage.peak_disk_gb * headroom
        feasible = feasible_machines(catalog, need_cpu, need_mem)
        if not feasible:
            raise NoFeasibleMachine(rule, _binding_constraint(catalog, need_cpu, need_mem))
        disk_gb = max(DISK_GRANULARITY_GB, math.ceil(need_disk / DISK_GRANULARITY_GB) * DISK_GRANULARITY_GB)
        requested_class = (disk_classes or {}).get(rule)
        rules[rule] = StepResources(
            machine=feasible[0].name,
            disk_gb=disk_gb,
            disk_class=requested_class or "balanced",
        )
    return Recommendation(rules=rules, headroom=headroom)


# ---------------------------------------------------------------------------
# billing


def estimate_task_cost(
    machine: MachineType | str,
    disk_gb: int | Fraction,
    disk_class: str,
    hours: Fraction | int | str,
    catalog: MachineCatalog,
) -> Fraction:
    """machine price x hours + disk price x GB x hours, exactly."""
    if isinstance(machine, str):
        machine = catalog.machine(machine)
    hours = to_frac(hours)
    if hours < 0:
        raise OptimizerError("hours must be >= 0")
    return machine.price_per_hour * hours + catalog.disk_price(disk_class) * to_frac(disk_gb) * hours


def compare_costs(baseline, optimized) -> Fraction:
    """Cost reduction percent: (1 - optimized/baseline) x 100."""
    baseline = to_frac(baseline)
    optimized = to_frac(optimized)
    if baseline <= 0:
        raise NonpositiveBaseline(f"baseline cost must be positive, got {baseline}")
    return (1 - optimized / baseline) * 100


@dataclass(frozen=True)
class SampleCost:
    sample_id: str
    machine_cost: Fraction
    disk_cost: Fraction

    @property
    def total(self) -> Fraction:
        return self.machine_cost + self.disk_cost


@dataclass(frozen=True)
class Comparison:
    baseline: Fraction
    optimized: Fraction

    @property
    def reduction_percent(self) -> Fraction:
        return compare_costs(self.baseline, self.optimized)


@dataclass
class CostReport:
    job_id: str
    samples: list[SampleCost]
    currency: str = "$"
    comparison: Comparison | None = None

    @property
    def aggregate(self) -> Fraction:
        return sum((s.total for s in self.samples), Fraction(0))

    @property
    def mean_per_sample(self) -> Fraction:
        if not self.samples:
            return Fraction(0)
        return self.aggregate / len(self.samples)

    def with_comparison(self, baseline_per_sample) -> "CostReport":
        return replace(self, comparison=Comparison(to_frac(baseline_per_sample), self.mean_per_sample))

    def to_dict(self) -> dict:
        out = {
            "job_id": self.job_id,
            "currency": self.currency,
            "samples": [
                {
                    "sample_id": s.sample_id,
                    "machine_cost": frac_str(s.machine_cost),
                    "disk_cost": frac_str(s.disk_cost),
                    "total": frac_str(s.total),
                    "total_rendered": str(round_cents(s.total)),
                }
                for s in self.samples
            ],
            "aggregate": frac_str(self.aggregate),
            "aggregate_rendered": str(round_cents(self.aggregate)),
            "mean_per_sample": frac_str(self.mean_per_sample),
            "mean_per_sample_rendered": str(round_cents(self.mean_per_sample)),
        }
        if self.comparison is not None:
            out["comparison"] = {
                "baseline": frac_str(self.comparison.baseline),
                "optimized": frac_str(self.comparison.optimized),
                "reduction_percent": format_percent(self.comparison.reduction_percent),
            }
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    def render_table(self) -> str:
        lines = [f"cost report for job {self.job_id}"]
        lines.append(f"{'sample':<20} {'machine':>12} {'disk':>12} {'total':>12}")
        for s in self.samples:
            lines.append(
                f"{s.sample_id:<20} {format_money(s.machine_cost, self.currency):>12} "
                f"{format_money(s.disk_cost, self.currency):>12} {format_money(s.total, self.currency):>12}"
            )
        lines.append(f"{'aggregate':<20} {'':>12} {'':>12} {format_money(self.aggregate, self.currency):>12}")
        lines.append(
            f"{'mean per sample':<20} {'':>12} {'':>12} {format_money(self.mean_per_sample, self.currency):>12}"
        )
        if self.comparison is not None:
            lines.append(
                f"baseline {format_money(self.comparison.baseline, self.currency)}/sample -> "
                f"optimized {format_money(self.comparison.optimized, self.currency)}/sample: "
                f"{format_percent(self.comparison.reduction_percent)} cost reduction"
            )
        return "\n".join(lines)


def job_cost_report(
    report: JobReport,
    resources: Recommendation | ResourceRequest | None,
    catalog: MachineCatalog,
) -> CostReport:
    """Bill every executed step, retries included (failed attempts cost money).

    Each step is billed at the machine and disk it actually ran on (recorded
    in the step outcome); `resources` fills any gaps, e.g. outcomes imported
    from an older log.
    """
    fallback: dict[str, ResourceRequest] = {}
    default_rr: ResourceRequest | None = None
    if isinstance(resources, Recommendation):
        fallback = resources.resource_map()
    elif isinstance(resources, ResourceRequest):
        default_rr = resources

    per_sample: dict[str, SampleCost] = {}
    for attempt in report.attempts:
        machine_cost = Fraction(0)
        disk_cost = Fraction(0)
        for step in attempt.steps:
            if step.duration_hours is None:
                raise MissingDuration(f"step {step.rule!r} of {attempt.sample_id!r} has no duration")
            rr = fallback.get(step.rule, default_rr) or ResourceRequest()
            machine_name = step.machine or rr.machine
            if machine_name is None:
                raise OptimizerError(f"no machine recorded or supplied for step {step.rule!r}")
            disk_gb = step.disk_gb if step.disk_gb is not None else (rr.disk_gb or 0)
            disk_class = step.disk_class or rr.disk_class or "balanced"
            machine_cost += catalog.machine(machine_name).price_per_hour * step.duration_hours
            disk_cost += catalog.disk_price(disk_class) * Fraction(disk_gb) * step.duration_hours
        prev = per_sample.get(attempt.sample_id)
        if prev is None:
            per_sample[attempt.sample_id] = SampleCost(attempt.sample_id, machine_cost, disk_cost)
        else:
            per_sample[attempt.sample_id] = SampleCost(
                attempt.sample_id, prev.machine_cost + machine_cost, prev.disk_cost + disk_cost
            )
    samples = [per_sample[s] for s in sorted(per_sample)]
    return CostReport(job_id=report.job_id, samples=samples, currency=catalog.currency)
