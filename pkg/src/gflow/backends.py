"""Task execution backends: a local subprocess runner and a cluster simulator.

Both backends drive the same controller (lease, report, event log), so a job
behaves identically whether time is wall-clock or virtual. The simulator is a
single-threaded discrete-event loop ordered by (time, sequence); identical
(job, workload, seed, pools) inputs produce byte-identical event logs. The
local backend runs step commands as subprocesses with up to `capacity`
concurrent tasks, capturing per-step stdout/stderr and best-effort resource
peaks.

A workload spec tells the simulator how long each rule runs and how much it
consumes. Values are either fixed numbers (exact rationals) or seeded
distributions; draws are keyed by (seed, sample, rule, attempt, field) so a
given attempt is reproducible in isolation.
"""

from __future__ import annotations

import functools
import hashlib
import heapq
import json
import os
import random
import shlex
import shutil
import signal
import subprocess
import time
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from pathlib import Path

import psutil

from .catalog import MachineCatalog, MachineType
from .errors import BackendError, IncompleteSpec, NotInFlight, OrchestratorError
from .events import Event, EventLog, read_events
from .orchestrator import (
    DEFAULT_LEASE_HOURS,
    Controller,
    Job,
    Lease,
    TaskOutcome,
    TaskState,
)
from .rational import frac_str, to_frac
from .store import GIB, ObjectStore, StoreUri
from .workflow import StepSpec, TaskPlan, apply_resources, compile_task

MEM_SAMPLE_SECONDS = 1.0

OUT_OF_MEMORY = "OutOfMemory"
DISK_FULL = "DiskFull"
INJECTED_FAULT = "InjectedFault"
DISK_QUOTA_EXCEEDED = "DiskQuotaExceeded"
TIMEOUT = "Timeout"
SPAWN_FAILURE = "SpawnFailure"


# ---------------------------------------------------------------------------
# outcomes


@dataclass(frozen=True)
class StepOutcome:
    rule: str
    duration_hours: Fraction
    exit_status: int
    peak_cpu_cores: Fraction
    peak_mem_gb: Fraction
    peak_disk_gb: Fraction
    machine: str | None
    disk_gb: int | None
    disk_class: str | None
    failure_reason: str | None = None

    @property
    def ok(self) -> bool:
        return self.failure_reason is None


@dataclass(frozen=True)
class ExecutionOutcome:
    sample_id: str
    attempt: int
    steps: tuple[StepOutcome, ...]
    succeeded: bool
    failed_step: str | None = None
    failure_reason: str | None = None

    @property
    def total_hours(self) -> Fraction:
        return sum((s.duration_hours for s in self.steps), Fraction(0))

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "attempt": self.attempt,
            "succeeded": self.succeeded,
            "failed_step": self.failed_step,
            "failure_reason": self.failure_reason,
            "steps": [
                {
                    "step": s.rule,
                    "duration_hours": frac_str(s.duration_hours),
                    "exit_status": s.exit_status,
                    "peaks": {
                        "cpu": frac_str(s.peak_cpu_cores),
                        "mem_gb": frac_str(s.peak_mem_gb),
                        "disk_gb": frac_str(s.peak_disk_gb),
                    },
                    "machine": s.machine,
                    "disk_gb": s.disk_gb,
                    "disk_class": s.disk_class,
                    "failure_reason": s.failure_reason,
                }
                for s in self.steps
            ],
        }


# ---------------------------------------------------------------------------
# workload specification (simulator input)


@dataclass(frozen=True)
class ValueSpec:
    """Fixed value or parameterized distribution for one measured quantity."""

    kind: str  # fixed | uniform | normal
    a: Fraction = Fraction(0)
    b: Fraction = Fraction(0)

    @classmethod
    def fixed(cls, value) -> "ValueSpec":
        return cls("fixed", to_frac(value))

    @classmethod
    def from_json(cls, value, what: str) -> "ValueSpec":
        if isinstance(value, (int, Decimal, str)):
            return cls.fixed(value)
        if isinstance(value, float):
            return cls.fixed(Decimal(str(value)))
        if isinstance(value, dict):
            dist = value.get("dist")
            if dist == "uniform":
                return cls("uniform", to_frac(value["low"]), to_frac(value["high"]))
            if dist == "normal":
                return cls("normal", to_frac(value["mean"]), to_frac(value["sd"]))
            raise BackendError(f"unknown distribution {dist!r} for {what}")
        raise BackendError(f"bad value {value!r} for {what}")

    @property
    def degenerate(self) -> bool:
        return self.kind == "fixed" or (self.kind == "uniform" and self.a == self.b) or (
            self.kind == "normal" and self.b == 0
        )

    def expected(self) -> Fraction:
        if self.kind == "uniform":
            return (self.a + self.b) / 2
        return self.a

    def sample(self, rng: random.Random) -> Fraction:
        if self.kind == "fixed":
            return self.a
        if self.kind == "uniform":
            return Fraction(rng.uniform(float(self.a), float(self.b)))
        drawn = Fraction(rng.normalvariate(float(self.a), float(self.b)))
        return max(Fraction(0), drawn)


_LOAD_FIELDS = ("duration_hours", "peak_cpu", "peak_mem_gb", "peak_disk_gb")


@dataclass(frozen=True)
class RuleLoad:
    duration_hours: ValueSpec
    peak_cpu: ValueSpec = field(default_factory=lambda: ValueSpec.fixed(0))
    peak_mem_gb: ValueSpec = field(default_factory=lambda: ValueSpec.fixed(0))
    peak_disk_gb: ValueSpec = field(default_factory=lambda: ValueSpec.fixed(0))

    @classmethod
    def from_json(cls, data: dict, rule: str) -> "RuleLoad":
        if "duration_hours" not in data:
            raise BackendError(f"rule {rule!r} needs duration_hours")
        kwargs = {}
        for name in _LOAD_FIELDS:
            if name in data:
                kwargs[name] = ValueSpec.from_json(data[name], f"{rule}.{name}")
        return cls(**kwargs)

    def overridden(self, data: dict, what: str) -> "RuleLoad":
        kwargs = {name: getattr(self, name) for name in _LOAD_FIELDS}
        for name in _LOAD_FIELDS:
            if name in data:
                kwargs[name] = ValueSpec.from_json(data[name], what)
        return RuleLoad(**kwargs)


@dataclass(frozen=True)
class FailurePlan:
    attempts: frozenset[int]
    step: str | None = None  # None means the first step of the plan


@dataclass(frozen=True)
class WorkloadSpec:
    seed: int
    rules: dict[str, RuleLoad]
    overrides: dict[tuple[str, str], RuleLoad] = field(default_factory=dict)
    failures: dict[str, FailurePlan] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "WorkloadSpec":
        rules = {name: RuleLoad.from_json(spec, name) for name, spec in data.get("rules", {}).items()}
        overrides: dict[tuple[str, str], RuleLoad] = {}
        for entry in data.get("overrides", []):
            sample, rule = entry["sample"], entry["rule"]
            base = overrides.get((sample, rule)) or rules.get(rule)
            if base is None:
                base = RuleLoad.from_json(entry, f"override {sample}/{rule}")
            overrides[(sample, rule)] = base.overridden(entry, f"override {sample}/{rule}")
        failures = {}
        for entry in data.get("failures", []):
            failures[entry["sample"]] = FailurePlan(
                attempts=frozenset(int(a) for a in entry.get("attempts", [])),
                step=entry.get("step"),
            )
        return cls(seed=int(data.get("seed", 0)), rules=rules, overrides=overrides, failures=failures)

    @classmethod
    def load(cls, path: str | Path) -> "WorkloadSpec":
        data = json.loads(Path(path).read_text(encoding="utf-8"), parse_float=Decimal)
        return cls.from_dict(data)

    def with_seed(self, seed: int) -> "WorkloadSpec":
        return WorkloadSpec(seed=seed, rules=self.rules, overrides=self.overrides, failures=self.failures)

    def check_covers(self, plan: TaskPlan) -> None:
        missing = [
            s.rule_name
            for s in plan.steps
            if s.rule_name not in self.rules and (plan.sample_id, s.rule_name) not in self.overrides
        ]
        if missing:
            raise IncompleteSpec(f"workload spec has no entry for rule(s): {', '.join(missing)}")

    def rule_load(self, sample_id: str, rule: str) -> RuleLoad:
        load = self.overrides.get((sample_id, rule)) or self.rules.get(rule)
        if load is None:
            raise IncompleteSpec(f"workload spec has no entry for rule {rule!r}")
        return load

    def _rng(self, *key) -> random.Random:
        material = "|".join(str(k) for k in (self.seed, *key))
        digest = hashlib.sha256(material.encode("utf-8")).digest()
        return random.Random(int.from_bytes(digest[:8], "big"))

    def draw(self, sample_id: str, rule: str, attempt: int) -> dict[str, Fraction]:
        """Deterministic draw keyed by (seed, sample, rule, attempt, field)."""
        load = self.rule_load(sample_id, rule)
        return {
            name: getattr(load, name).sample(self._rng(sample_id, rule, attempt, name))
            for name in _LOAD_FIELDS
        }

    def injected_failure(self, sample_id: str, attempt: int, plan: TaskPlan) -> str | None:
        fp = self.failures.get(sample_id)
        if fp is None or attempt not in fp.attempts:
            return None
        return fp.step if fp.step is not None else plan.steps[0].rule_name

    def expected_task_hours(self, plan: TaskPlan) -> Fraction:
        return sum((self.rule_load(plan.sample_id, s.rule_name).duration_hours.expected() for s in plan.steps), Fraction(0))


# ---------------------------------------------------------------------------
# virtual clock


class VirtualClock:
    """Monotone simulated time in hours since job start."""

    def __init__(self, start: Fraction = Fraction(0)):
        self.now = to_frac(start)

    def __call__(self) -> Fraction:
        return self.now

    def advance_to(self, t: Fraction) -> None:
        if t < self.now:
            raise ValueError(f"clock cannot move backwards ({t} < {self.now})")
        self.now = t


def wall_clock(epoch: float | None = None):
    """Hours since `epoch` (defaults to now), as exact-enough rationals."""
    t0 = time.time() if epoch is None else epoch
    return lambda: Fraction(Decimal(str(round((time.time() - t0) / 3600.0, 9))))


# ---------------------------------------------------------------------------
# simulated execution


def _sim_step(
    spec: WorkloadSpec,
    plan: TaskPlan,
    step: StepSpec,
    attempt: int,
    machine: MachineType,
    fail_step: str | None,
) -> StepOutcome:
    values = spec.draw(plan.sample_id, step.rule_name, attempt)
    reason = None
    if values["peak_mem_gb"] > machine.mem_gb:
        reason = OUT_OF_MEMORY
    elif step.resources.disk_gb is not None and values["peak_disk_gb"] > step.resources.disk_gb:
        reason = DISK_FULL
    elif fail_step == step.rule_name:
        reason = INJECTED_FAULT
    return StepOutcome(
        rule=step.rule_name,
        duration_hours=values["duration_hours"],
        exit_status=0 if reason is None else 1,
        peak_cpu_cores=values["peak_cpu"],
        peak_mem_gb=values["peak_mem_gb"],
        peak_disk_gb=values["peak_disk_gb"],
        machine=machine.name,
        disk_gb=step.resources.disk_gb,
        disk_class=step.resources.disk_class,
        failure_reason=reason,
    )


def run_task_sim(
    plan: TaskPlan,
    spec: WorkloadSpec,
    clock: VirtualClock,
    machine: MachineType,
    attempt: int = 1,
) -> ExecutionOutcome:
    """Simulate one task attempt on a single machine, advancing the clock.

    Steps run sequentially; a failing step still consumes its drawn duration
    and later steps never run. Failure reasons: peak memory above the
    machine's, peak disk above the step's provisioned disk, or an injected
    fault for this attempt.
    """
    spec.check_covers(plan)
    fail_step = spec.injected_failure(plan.sample_id, attempt, plan)
    steps: list[StepOutcome] = []
    for step in plan.steps:
        outcome = _sim_step(spec, plan, step, attempt, machine, fail_step)
        clock.advance_to(clock.now + outcome.duration_hours)
        steps.append(outcome)
        if not outcome.ok:
            return ExecutionOutcome(
                sample_id=plan.sample_id,
                attempt=attempt,
                steps=tuple(steps),
                succeeded=False,
                failed_step=outcome.rule,
                failure_reason=outcome.failure_reason,
            )
    return ExecutionOutcome(plan.sample_id, attempt, tuple(steps), succeeded=True)


# ---------------------------------------------------------------------------
# local execution


def _dir_bytes(path: Path) -> int:
    return sum(f.stat().st_size for f in path.rglob("*") if f.is_file())


def _kill_tree(proc: subprocess.Popen) -> None:
    try:
        os.killpg(os.getpgid(proc.pid), signal.SIGKILL)
    except (ProcessLookupError, PermissionError, OSError):
        try:
            psutil.Process(proc.pid).kill()
        except psutil.Error:
            pass


def _watch_process(proc: subprocess.Popen, timeout: float | None) -> tuple[int, Fraction, float, bool]:
    """Wait for a subprocess, sampling its process tree.

    Returns (exit code, peak tree RSS in GB, cpu seconds, timed out). Memory
    and CPU are best-effort OS accounting sampled at roughly one-second
    cadence; very short steps may record zero.
    """
    peak_rss = 0
    cpu_seconds = 0.0
    try:
        root = psutil.Process(proc.pid)
    except psutil.NoSuchProcess:
        root = None
    deadline = None if timeout is None else time.monotonic() + timeout
    while True:
        if root is not None:
            try:
                tree = [root] + root.children(recursive=True)
                peak_rss = max(peak_rss, sum(p.memory_info().rss for p in tree))
                cpu_seconds = max(
                    cpu_seconds,
                    sum(p.cpu_times().user + p.cpu_times().system for p in tree),
                )
            except psutil.Error:
                pass
        budget = MEM_SAMPLE_SECONDS
        if deadline is not None:
            budget = min(budget, max(deadline - time.monotonic(), 0.01))
        try:
            code = proc.wait(timeout=budget)
            return code, Fraction(peak_rss, GIB), cpu_seconds, False
        except subprocess.TimeoutExpired:
            if deadline is not None and time.monotonic() >= deadline:
                _kill_tree(proc)
                proc.wait()
                return -9, Fraction(peak_rss, GIB), cpu_seconds, True


def run_task_local(
    plan: TaskPlan,
    disk_root: str | Path,
    refs: tuple[ObjectStore, StoreUri] | None = None,
    *,
    attempt: int = 1,
    log_dir: str | Path | None = None,
    step_timeout: float | None = None,
    runner_template: str | None = None,
) -> ExecutionOutcome:
    """Execute a plan's steps as local subprocesses under `disk_root`.

    Steps run in topological order with `disk_root` as working directory and
    stop at the first nonzero exit. Wall time is recorded per step; peak
    memory is best-effort OS accounting of the child process tree sampled at
    one-second cadence, and peak disk is the directory size after each step.
    A step whose directory footprint exceeds its provisioned disk fails with
    DiskQuotaExceeded. When `refs` is given, reference objects are staged to
    `<disk_root>/reference/` first.
    """
    disk_root = Path(disk_root)
    disk_root.mkdir(parents=True, exist_ok=True)
    if log_dir is not None:
        Path(log_dir).mkdir(parents=True, exist_ok=True)

    steps: list[StepOutcome] = []

    def failed(step: StepSpec, reason: str, duration: Fraction, exit_status: int,
               peak_mem: Fraction, peak_disk: Fraction, cpu: Fraction) -> ExecutionOutcome:
        steps.append(
            StepOutcome(step.rule_name, duration, exit_status, cpu, peak_mem, peak_disk,
                        step.resources.machine, step.resources.disk_gb, step.resources.disk_class, reason)
        )
        return ExecutionOutcome(plan.sample_id, attempt, tuple(steps), False, step.rule_name, reason)

    if refs is not None:
        store, ref_root = refs
        quota = max((s.resources.disk_gb for s in plan.steps if s.resources.disk_gb), default=None)
        store.stage_references(ref_root, disk_root, disk_gb=quota)

    for step in plan.steps:
        command = step.resolved_command
        if runner_template:
            command = runner_template.format(command=shlex.quote(command), image=step.image or "")
        out_fh = err_fh = None
        started = time.monotonic()
        try:
            if log_dir is not None:
                out_fh = open(Path(log_dir) / f"{step.rule_name}.out", "wb")
                err_fh = open(Path(log_dir) / f"{step.rule_name}.err", "wb")
            proc = subprocess.Popen(
                command,
                shell=True,
                cwd=disk_root,
                stdout=out_fh if out_fh is not None else subprocess.DEVNULL,
                stderr=err_fh if err_fh is not None else subprocess.DEVNULL,
                start_new_session=True,
            )
            code, peak_mem_gb, cpu_seconds, timed_out = _watch_process(proc, step_timeout)
        except OSError as exc:
            wall = Fraction(Decimal(str(round((time.monotonic() - started) / 3600.0, 9))))
            return failed(step, f"{SPAWN_FAILURE}: {exc}", max(wall, Fraction(1, 3_600_000)), -1,
                          Fraction(0), Fraction(0), Fraction(0))
        finally:
            for fh in (out_fh, err_fh):
                if fh is not None:
                    fh.close()
        wall_seconds = time.monotonic() - started
        wall = Fraction(Decimal(str(round(wall_seconds / 3600.0, 9))))
        wall = max(wall, Fraction(1, 3_600_000))  # a started step has positive duration
        cpu_cores = Fraction(Decimal(str(round(max(cpu_seconds, 0.0) / max(wall_seconds, 1e-9), 4))))
        disk_bytes = _dir_bytes(disk_root)
        peak_disk_gb = Fraction(disk_bytes, GIB)

        if timed_out:
            return failed(step, TIMEOUT, wall, code, peak_mem_gb, peak_disk_gb, cpu_cores)
        if step.resources.disk_gb is not None and disk_bytes > step.resources.disk_gb * GIB:
            return failed(step, DISK_QUOTA_EXCEEDED, wall, code, peak_mem_gb, peak_disk_gb, cpu_cores)
        if code != 0:
            return failed(step, f"exit {code}", wall, code, peak_mem_gb, peak_disk_gb, cpu_cores)
        steps.append(
            StepOutcome(step.rule_name, wall, code, cpu_cores, peak_mem_gb, peak_disk_gb,
                        step.resources.machine, step.resources.disk_gb, step.resources.disk_class)
        )
    return ExecutionOutcome(plan.sample_id, attempt, tuple(steps), succeeded=True)


# ---------------------------------------------------------------------------
# backends


@dataclass
class SimBackend:
    """Virtual cluster: durations and peaks come from a workload spec."""

    workload: WorkloadSpec
    catalog: MachineCatalog
    store: ObjectStore
    reference_root: str = "store://reference-data"

    name = "sim"

    def reference_root_for(self, sample_id: str) -> str:
        return self.reference_root


@dataclass
class LocalBackend:
    """Runs step commands as subprocesses on this machine."""

    store: ObjectStore
    workdisk_root: Path
    log_root: Path | None = None
    ref_root: StoreUri | None = None
    step_timeout: float | None = None
    runner_template: str | None = None

    name = "local"

    def disk_for(self, sample_id: str) -> Path:
        return Path(self.workdisk_root) / sample_id

    def reference_root_for(self, sample_id: str) -> str:
        return str(self.disk_for(sample_id) / "reference")

    def execute(self, plan: TaskPlan, lease: Lease) -> ExecutionOutcome:
        disk = self.disk_for(plan.sample_id)
        if disk.exists():
            shutil.rmtree(disk)  # retries start from a clean disk
        log_dir = Path(self.log_root) / plan.sample_id if self.log_root else None
        refs = (self.store, self.ref_root) if self.ref_root else None
        try:
            return run_task_local(
                plan,
                disk,
                refs,
                attempt=lease.attempt,
                log_dir=log_dir,
                step_timeout=self.step_timeout,
                runner_template=self.runner_template,
            )
        except Exception as exc:  # staging/setup errors fail the attempt, not the engine
            return ExecutionOutcome(
                sample_id=plan.sample_id,
                attempt=lease.attempt,
                steps=(),
                succeeded=False,
                failed_step=plan.steps[0].rule_name if plan.steps else None,
                failure_reason=f"{type(exc).__name__}: {exc}",
            )


# ---------------------------------------------------------------------------
# job report


@dataclass
class JobReport:
    job_id: str
    backend: str
    makespan_hours: Fraction | None
    attempts: list[ExecutionOutcome]
    final: dict[str, TaskState]
    counts: dict[str, int]
    log_path: Path

    def outcomes(self) -> dict[str, ExecutionOutcome]:
        """Last attempt per sample."""
        out: dict[str, ExecutionOutcome] = {}
        for attempt in self.attempts:
            out[attempt.sample_id] = attempt
        return out

    @property
    def all_succeeded(self) -> bool:
        return all(state is TaskState.SUCCEEDED for state in self.final.values())

    def to_dict(self) -> dict:
        return {
            "job_id": self.job_id,
            "backend": self.backend,
            "makespan_hours": frac_str(self.makespan_hours) if self.makespan_hours is not None else None,
            "counts": self.counts,
            "final": {s: st.value for s, st in sorted(self.final.items())},
            "attempts": [a.to_dict() for a in self.attempts],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"


def attempts_from_events(events: list[Event]) -> list[ExecutionOutcome]:
    """Rebuild every execution attempt (including pre-crash ones) from the log."""
    open_attempts: dict[str, dict] = {}
    attempts: list[ExecutionOutcome] = []

    def close(sample_id: str, succeeded: bool, failed_step=None, reason=None):
        info = open_attempts.pop(sample_id, None)
        if info is None:
            return
        attempts.append(
            ExecutionOutcome(
                sample_id=sample_id,
                attempt=info["attempt"],
                steps=tuple(info["steps"]),
                succeeded=succeeded,
                failed_step=failed_step,
                failure_reason=reason,
            )
        )

    for ev in events:
        if ev.event == "task_leased":
            if ev.sample_id in open_attempts:  # crash-resume without an explicit close
                close(ev.sample_id, False, reason="abandoned")
            open_attempts[ev.sample_id] = {"attempt": int(ev.payload["attempt"]), "steps": []}
        elif ev.event == "step_finished" and ev.sample_id in open_attempts:
            p = ev.payload
            peaks = p.get("peaks", {})
            open_attempts[ev.sample_id]["steps"].append(
                StepOutcome(
                    rule=p["step"],
                    duration_hours=Fraction(str(p.get("duration_hours", "0"))),
                    exit_status=0 if p.get("status") == "ok" else 1,
                    peak_cpu_cores=Fraction(str(peaks.get("cpu", "0"))),
                    peak_mem_gb=Fraction(str(peaks.get("mem_gb", "0"))),
                    peak_disk_gb=Fraction(str(peaks.get("disk_gb", "0"))),
                    machine=p.get("machine"),
                    disk_gb=p.get("disk_gb"),
                    disk_class=p.get("disk_class"),
                    failure_reason=p.get("reason") if p.get("status") != "ok" else None,
                )
            )
        elif ev.event == "task_succeeded":
            if ev.payload.get("reused"):
                steps = tuple(
                    StepOutcome(
                        rule=s["step"],
                        duration_hours=Fraction(str(s.get("duration_hours", "0"))),
                        exit_status=int(s.get("exit_status", 0)),
                        peak_cpu_cores=Fraction(str(s.get("peaks", {}).get("cpu", "0"))),
                        peak_mem_gb=Fraction(str(s.get("peaks", {}).get("mem_gb", "0"))),
                        peak_disk_gb=Fraction(str(s.get("peaks", {}).get("disk_gb", "0"))),
                        machine=s.get("machine"),
                        disk_gb=s.get("disk_gb"),
                        disk_class=s.get("disk_class"),
                    )
                    for s in ev.payload.get("steps", [])
                )
                open_attempts.pop(ev.sample_id, None)
                attempts.append(
                    ExecutionOutcome(ev.sample_id, int(ev.payload.get("attempt", 1)), steps, succeeded=True)
                )
            else:
                close(ev.sample_id, True)
        elif ev.event == "task_failed":
            close(ev.sample_id, False, failed_step=ev.payload.get("step"), reason=ev.payload.get("reason"))
        elif ev.event == "lease_expired":
            close(ev.sample_id, False, reason="lease expired")
    for sample_id in list(open_attempts):
        close(sample_id, False, reason="in flight at shutdown")
    return attempts


# ---------------------------------------------------------------------------
# job driver


def _emit_step_events(controller: Controller, sample_id: str, outcome: ExecutionOutcome, pool: str) -> None:
    for step in outcome.steps:
        controller.step_started(sample_id, step.rule, pool=pool)
        controller.step_finished(
            sample_id,
            step.rule,
            step.ok,
            pool=pool,
            duration_hours=step.duration_hours,
            reason=step.failure_reason,
            peaks={
                "cpu": frac_str(step.peak_cpu_cores),
                "mem_gb": frac_str(step.peak_mem_gb),
                "disk_gb": frac_str(step.peak_disk_gb),
            },
            machine=step.machine,
            disk_gb=step.disk_gb,
            disk_class=step.disk_class,
        )


def _result_payload(outcome: ExecutionOutcome) -> bytes:
    return json.dumps(outcome.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"


def _ensure_sim_result(backend: SimBackend, controller: Controller, result_root: StoreUri,
                       outcome: ExecutionOutcome) -> None:
    """Write the sample's result object (no-clobber) and log it.

    Called before the success report so a crash can only leave a result
    without a Succeeded record (the retry then skips the write), never a
    Succeeded record without a result.
    """
    uri = result_root.join(outcome.sample_id, "result.json")
    backend.store.create_bucket(uri.bucket)
    _, created = backend.store.put_if_absent(uri, _result_payload(outcome))
    controller.result_written(outcome.sample_id, str(uri), created)


def _write_local_results(backend: LocalBackend, controller: Controller, result_root: StoreUri,
                         plan: TaskPlan, outcome: ExecutionOutcome) -> None:
    """Upload the task's sink outputs (outputs no later step consumes)."""
    consumed = {p for s in plan.steps for p in s.resolved_inputs}
    disk = backend.disk_for(plan.sample_id)
    backend.store.create_bucket(result_root.bucket)
    wrote_any = False
    for step in plan.steps:
        for out in step.resolved_outputs:
            if out in consumed:
                continue
            path = Path(out)
            if not path.is_absolute():
                path = disk / out
            if not path.is_file():
                continue
            rel = out.lstrip("/").replace("..", "_")
            uri = result_root.join(plan.sample_id, rel)
            _, created = backend.store.put_if_absent(uri, path.read_bytes())
            controller.result_written(plan.sample_id, str(uri), created)
            wrote_any = True
    if not wrote_any:  # keep one result object per sample even without sink files
        uri = result_root.join(plan.sample_id, "result.json")
        _, created = backend.store.put_if_absent(uri, _result_payload(outcome))
        controller.result_written(plan.sample_id, str(uri), created)


def _note_existing_results(store: ObjectStore, controller: Controller, result_root: StoreUri,
                           sample_id: str, recorded: ExecutionOutcome) -> None:
    """Record the result objects a reused sample already has (write none missing)."""
    store.create_bucket(result_root.bucket)
    existing = store.list_prefix(result_root.join(sample_id))
    if existing:
        for uri in existing:
            controller.result_written(sample_id, str(uri), False)
    else:
        uri = result_root.join(sample_id, "result.json")
        _, created = store.put_if_absent(uri, _result_payload(recorded))
        controller.result_written(sample_id, str(uri), created)


def _report_reused(controller: Controller, sample_id: str, recorded: ExecutionOutcome) -> None:
    """Mark a sample done from a recorded outcome (its result already exists)."""
    rec = controller.state.records[sample_id]
    payload = {
        "attempt": rec.attempts,
        "duration_hours": "0",
        "reused": True,
        "steps": [
            {
                "step": s.rule,
                "duration_hours": frac_str(s.duration_hours),
                "exit_status": s.exit_status,
                "peaks": {
                    "cpu": frac_str(s.peak_cpu_cores),
                    "mem_gb": frac_str(s.peak_mem_gb),
                    "disk_gb": frac_str(s.peak_disk_gb),
                },
                "machine": s.machine,
                "disk_gb": s.disk_gb,
                "disk_class": s.disk_class,
            }
            for s in recorded.steps
        ],
    }
    controller._emit("task_succeeded", sample_id, payload=payload)


@dataclass
class _Pool:
    capacity: int
    in_use: int = 0
    waiting: list = field(default_factory=list)

    @property
    def free(self) -> int:
        return self.capacity - self.in_use


class _SimTask:
    __slots__ = ("lease", "plan", "idx", "steps")

    def __init__(self, lease: Lease, plan: TaskPlan):
        self.lease = lease
        self.plan = plan
        self.idx = 0
        self.steps: list[StepOutcome] = []


def _run_sim(controller: Controller, backend: SimBackend, pools: dict[str, int],
             plan_for, skip: dict[str, ExecutionOutcome], result_root: StoreUri,
             clock: VirtualClock) -> None:
    spec = backend.workload
    heap: list[tuple[Fraction, int, _SimTask]] = []
    seq = 0
    pool_states: dict[str, _Pool] = {}

    def pool(name: str | None) -> _Pool:
        key = name or "default"
        if key not in pool_states:
            pool_states[key] = _Pool(capacity=max(1, int(pools.get(key, 1))))
        return pool_states[key]

    def machine_of(step: StepSpec) -> MachineType:
        if step.resources.machine is None:
            raise BackendError(f"step {step.rule_name!r} has no machine assigned (set defaults)")
        return backend.catalog.machine(step.resources.machine)

    def start_step(task: _SimTask) -> None:
        nonlocal seq
        step = task.plan.steps[task.idx]
        p = pool(step.resources.machine)
        p.in_use += 1
        fail_step = spec.injected_failure(task.plan.sample_id, task.lease.attempt, task.plan)
        outcome = _sim_step(spec, task.plan, step, task.lease.attempt, machine_of(step), fail_step)
        controller.step_started(task.lease.sample_id, step.rule_name, pool=step.resources.machine)
        seq += 1
        heapq.heappush(heap, (clock.now + outcome.duration_hours, seq, (task, outcome)))

    def ready_step(task: _SimTask) -> None:
        step = task.plan.steps[task.idx]
        p = pool(step.resources.machine)
        if p.free > 0:
            start_step(task)
        else:
            p.waiting.append(task)

    def try_lease() -> None:
        while True:
            head = controller.state.queue.peek()
            if head is None:
                return
            if head not in skip:
                plan = plan_for(head)
                spec.check_covers(plan)
                if pool(plan.steps[0].resources.machine).free <= 0:
                    return
                controller.lease_duration = max(DEFAULT_LEASE_HOURS, 2 * spec.expected_task_hours(plan))
            lease = controller.lease_next()
            if lease is None:
                return
            if lease.sample_id in skip:
                recorded = skip[lease.sample_id]
                _ensure_sim_result(backend, controller, result_root, recorded)
                _report_reused(controller, lease.sample_id, recorded)
                continue
            task = _SimTask(lease, plan_for(lease.sample_id))
            start_step(task)

    try_lease()
    while heap:
        t, _, (task, outcome) = heapq.heappop(heap)
        clock.advance_to(t)
        step = task.plan.steps[task.idx]
        p = pool(step.resources.machine)
        p.in_use -= 1
        controller.step_finished(
            task.lease.sample_id,
            step.rule_name,
            outcome.ok,
            pool=step.resources.machine,
            duration_hours=outcome.duration_hours,
            reason=outcome.failure_reason,
            peaks={
                "cpu": frac_str(outcome.peak_cpu_cores),
                "mem_gb": frac_str(outcome.peak_mem_gb),
                "disk_gb": frac_str(outcome.peak_disk_gb),
            },
            machine=outcome.machine,
            disk_gb=outcome.disk_gb,
            disk_class=outcome.disk_class,
        )
        task.steps.append(outcome)
        if not outcome.ok:
            controller.report_outcome(
                task.lease.sample_id,
                TaskOutcome(False, failed_step=step.rule_name, reason=outcome.failure_reason),
            )
        elif task.idx + 1 < len(task.plan.steps):
            task.idx += 1
            ready_step(task)
        else:
            total = sum((s.duration_hours for s in task.steps), Fraction(0))
            exec_outcome = ExecutionOutcome(
                task.lease.sample_id, task.lease.attempt, tuple(task.steps), succeeded=True
            )
            _ensure_sim_result(backend, controller, result_root, exec_outcome)
            controller.report_outcome(task.lease.sample_id, TaskOutcome(True, duration_hours=total))
        while p.waiting and p.free > 0:
            ready = p.waiting.pop(0)
            start_step(ready)
        try_lease()


def _run_local(controller: Controller, backend: LocalBackend, pools: dict[str, int],
               plan_for, skip: dict[str, ExecutionOutcome], result_root: StoreUri) -> None:
    capacity = max(1, sum(int(c) for c in pools.values()) or 1)
    with ThreadPoolExecutor(max_workers=capacity) as executor:
        futures: dict = {}
        while True:
            while len(futures) < capacity:
                lease = controller.lease_next()
                if lease is None:
                    break
                if lease.sample_id in skip:
                    recorded = skip[lease.sample_id]
                    _note_existing_results(backend.store, controller, result_root, lease.sample_id, recorded)
                    _report_reused(controller, lease.sample_id, recorded)
                    continue
                plan = plan_for(lease.sample_id)
                futures[executor.submit(backend.execute, plan, lease)] = lease
            if not futures:
                break
            done, _ = wait(futures, return_when=FIRST_COMPLETED)
            for fut in done:
                lease = futures.pop(fut)
                outcome = fut.result()
                _emit_step_events(controller, lease.sample_id, outcome, pool="local")
                try:
                    if outcome.succeeded:
                        _write_local_results(backend, controller, result_root,
                                             plan_for(lease.sample_id), outcome)
                        controller.report_outcome(
                            lease.sample_id, TaskOutcome(True, duration_hours=outcome.total_hours)
                        )
                    else:
                        controller.report_outcome(
                            lease.sample_id,
                            TaskOutcome(False, failed_step=outcome.failed_step, reason=outcome.failure_reason),
                        )
                except NotInFlight:
                    pass  # lease expired mid-run; redelivery owns the sample now


def run_job(
    job: Job,
    backend: SimBackend | LocalBackend,
    pools: dict[str, int],
    log_path: str | Path,
    *,
    resources: dict | None = None,
    resume: bool = False,
    skip_completed: dict[str, ExecutionOutcome] | None = None,
    fsync: bool = False,
    event_hook=None,
    seed: int | None = None,
) -> JobReport:
    """Drive a job to completion on the given backend.

    Leases samples FIFO, executes each attempt, applies failover retries, and
    writes one result object per Succeeded sample under the job's result root
    (no-clobber, so redelivery cannot duplicate results). `resources` maps
    rule names to ResourceRequest overrides (an optimized parameter set).
    With resume=True the controller is rebuilt from the existing event log
    and orphaned leases are re-queued.
    """
    if isinstance(backend, SimBackend) and seed is not None:
        backend = SimBackend(backend.workload.with_seed(seed), backend.catalog, backend.store,
                             backend.reference_root)
    is_sim = isinstance(backend, SimBackend)

    sim_clock: VirtualClock | None = None
    if resume:
        events, _ = read_events(log_path)
        last_time = events[-1].time if events else Fraction(0)
        if is_sim:
            sim_clock = VirtualClock(last_time)
            clock = sim_clock
        else:
            clock = wall_clock(time.time() - float(last_time) * 3600.0)
        controller = Controller.resume(log_path, clock, fsync=fsync)
    elif Path(log_path).exists() and Path(log_path).stat().st_size > 0:
        raise OrchestratorError(
            f"event log {log_path} already holds a job; pass resume=True to continue it "
            "or use a fresh log path"
        )
    else:
        if is_sim:
            sim_clock = VirtualClock()
            clock = sim_clock
        else:
            clock = wall_clock()
        controller = Controller.submit(job, EventLog(log_path, fsync=fsync), clock)
    if event_hook is not None:
        controller.log.hook = event_hook

    result_root = StoreUri.parse(job.result_root)

    @functools.lru_cache(maxsize=None)
    def plan_for(sample_id: str) -> TaskPlan:
        plan = compile_task(job.workflow, sample_id, job.defaults, backend.reference_root_for(sample_id))
        if resources:
            plan = apply_resources(plan, resources)
        return plan

    skip = dict(skip_completed or {})
    try:
        controller.attach_run(backend.name, pools)
        if is_sim:
            _run_sim(controller, backend, pools, plan_for, skip, result_root, sim_clock)
            makespan = sim_clock.now
        else:
            _run_local(controller, backend, pools, plan_for, skip, result_root)
            makespan = controller.clock()
        controller.finish(makespan)
    finally:
        controller.log.close()

    events, _ = read_events(log_path)
    state_counts = controller.state.counts()
    return JobReport(
        job_id=job.job_id,
        backend=backend.name,
        makespan_hours=makespan,
        attempts=attempts_from_events(events),
        final={s: r.state for s, r in controller.state.records.items()},
        counts=state_counts,
        log_path=Path(log_path),
    )
