"""Job controller: queue, task state machine, event sourcing, recovery.

One controller owns one job. Every state transition is emitted to the event
log first and then applied to memory through the same fold function used for
recovery, so replaying the log always reproduces the in-memory state. The
controller is deliberately clock-agnostic: a driver hands it a callable
returning hours since job start, which is wall time under the local backend
and virtual time under the simulator.

Scheduling contract: samples are leased FIFO with an expiry; expired leases
are re-enqueued before the next lease is granted (at-least-once delivery).
Attempts count at lease time, so a lost worker consumes retry budget. A
failed task re-enters the queue tail until the budget is exhausted.
"""

from __future__ import annotations

import math
import re
from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Callable

from .errors import (
    CorruptLog,
    DuplicateSampleId,
    EmptySampleList,
    NotInFlight,
    OrchestratorError,
    UnknownSample,
)
from .events import Event, EventLog, read_events
from .rational import frac_str, to_frac
from .workflow import ResourceRequest, Workflow

DEFAULT_MAX_RETRIES = 3
DEFAULT_LEASE_HOURS = Fraction(24)
ETA_WINDOW = 20


class TaskState(str, Enum):
    QUEUED = "Queued"
    RUNNING = "Running"
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"
    EXHAUSTED = "Exhausted"


class StepState(str, Enum):
    PENDING = "Pending"
    RUNNING = "Running"
    SUCCEEDED = "Succeeded"
    FAILED = "Failed"


@dataclass
class TaskRecord:
    sample_id: str
    state: TaskState = TaskState.QUEUED
    attempts: int = 0
    step_states: dict[str, StepState] = field(default_factory=dict)
    timestamps: list[tuple[str, Fraction]] = field(default_factory=list)
    lease_expires: Fraction | None = None
    result_uris: list[str] = field(default_factory=list)


@dataclass(frozen=True)
class Job:
    job_id: str
    workflow: Workflow | None
    sample_ids: tuple[str, ...]
    defaults: ResourceRequest
    max_retries: int
    result_root: str

    def __post_init__(self):
        if not self.sample_ids:
            raise EmptySampleList("job needs at least one sample")
        if len(set(self.sample_ids)) != len(self.sample_ids):
            raise DuplicateSampleId("sample IDs must be unique")
        if self.max_retries < 0:
            raise OrchestratorError("max_retries must be >= 0")


@dataclass(frozen=True)
class Lease:
    sample_id: str
    attempt: int
    expires: Fraction


@dataclass(frozen=True)
class TaskOutcome:
    """What a backend reports for one finished attempt."""

    succeeded: bool
    failed_step: str | None = None
    reason: str | None = None
    duration_hours: Fraction | None = None


def parse_sample_file(path: str | Path) -> list[str]:
    """One sample ID per line; `#` comments and blank lines are ignored."""
    ids: list[str] = []
    seen: set[str] = set()
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if re.search(r"\s", line):
            raise OrchestratorError(f"sample ID {line!r} contains whitespace")
        if line in seen:
            raise DuplicateSampleId(f"duplicate sample ID {line!r}")
        seen.add(line)
        ids.append(line)
    if not ids:
        raise EmptySampleList(f"no sample IDs in {path}")
    return ids


class QueueState:
    """FIFO of pending samples plus leased samples with expiry times."""

    def __init__(self, pending: tuple[str, ...] = ()):
        self.pending: deque[str] = deque(pending)
        self.in_flight: dict[str, Fraction] = {}

    def due(self, now: Fraction) -> list[str]:
        return [s for s, expiry in self.in_flight.items() if expiry <= now]

    def expire(self, sample_id: str) -> None:
        self.in_flight.pop(sample_id, None)
        self.pending.append(sample_id)

    def peek(self) -> str | None:
        return self.pending[0] if self.pending else None

    def mark_leased(self, sample_id: str, expires: Fraction) -> None:
        self.pending.remove(sample_id)
        self.in_flight[sample_id] = expires

    def ack(self, sample_id: str) -> None:
        self.in_flight.pop(sample_id, None)

    def requeue(self, sample_id: str) -> None:
        self.in_flight.pop(sample_id, None)
        self.pending.append(sample_id)

    def drop(self, sample_id: str) -> None:
        self.in_flight.pop(sample_id, None)
        try:
            self.pending.remove(sample_id)
        except ValueError:
            pass

    def lease_next(self, now: Fraction, lease_duration: Fraction = DEFAULT_LEASE_HOURS) -> str | None:
        """FIFO lease with redelivery: expired leases re-enter the queue first."""
        for sample_id in self.due(now):
            self.expire(sample_id)
        if not self.pending:
            return None
        sample_id = self.pending.popleft()
        self.in_flight[sample_id] = now + lease_duration
        return sample_id

    def __len__(self) -> int:
        return len(self.pending) + len(self.in_flight)


@dataclass
class JobStatus:
    job_id: str
    total: int
    counts: dict[str, int]
    per_step: dict[str, dict[str, int]]
    elapsed_hours: Fraction
    eta_hours: Fraction | None

    def render(self) -> str:
        lines = [f"job {self.job_id}: {self.total} samples"]
        lines.append("  " + "  ".join(f"{k}={v}" for k, v in self.counts.items() if v))
        for step, states in self.per_step.items():
            done = states.get(StepState.SUCCEEDED.value, 0)
            lines.append(f"  step {step}: {done}/{self.total} done")
        lines.append(f"  elapsed: {float(self.elapsed_hours):.3f} h")
        if self.eta_hours is not None:
            lines.append(f"  eta: {float(self.eta_hours):.3f} h")
        return "\n".join(lines)


class OrchestratorState:
    """Fold target for event replay; the only mutator of job state."""

    def __init__(self):
        self.job_id: str | None = None
        self.workflow_name: str | None = None
        self.sample_ids: tuple[str, ...] = ()
        self.steps: tuple[str, ...] = ()
        self.max_retries: int = DEFAULT_MAX_RETRIES
        self.defaults = ResourceRequest()
        self.result_root: str = ""
        self.records: dict[str, TaskRecord] = {}
        self.queue = QueueState()
        self.pools: dict[str, int] = {}
        self.pool_usage: dict[str, int] = {}
        self.backend_name: str | None = None
        self.completed_durations: list[Fraction] = []
        self.makespan: Fraction | None = None
        self.started_at: Fraction | None = None
        self.last_time: Fraction = Fraction(0)

    # -- helpers -------------------------------------------------------------

    def _record(self, sample_id: str | None) -> TaskRecord:
        if sample_id is None or sample_id not in self.records:
            raise UnknownSample(f"unknown sample {sample_id!r}")
        return self.records[sample_id]

    def counts(self) -> dict[str, int]:
        out = {state.value: 0 for state in TaskState}
        for rec in self.records.values():
            out[rec.state.value] += 1
        return out

    def revert_running(self) -> list[str]:
        """Re-queue tasks whose workers are gone (oldest lease first)."""
        reverted = []
        for sample_id in list(self.queue.in_flight):
            rec = self.records[sample_id]
            self.queue.requeue(sample_id)
            rec.state = TaskState.QUEUED
            rec.lease_expires = None
            rec.timestamps.append((TaskState.QUEUED.value, self.last_time))
            reverted.append(sample_id)
        return reverted

    def finished(self) -> bool:
        return all(r.state in (TaskState.SUCCEEDED, TaskState.EXHAUSTED) for r in self.records.values())

    # -- the fold ------------------------------------------------------------

    def apply(self, ev: Event) -> None:
        self.last_time = ev.time
        payload = ev.payload
        kind = ev.event
        if kind == "job_submitted":
            self.job_id = ev.job_id
            self.workflow_name = payload.get("workflow")
            self.sample_ids = tuple(payload["samples"])
            self.steps = tuple(payload.get("steps", ()))
            self.max_retries = int(payload.get("max_retries", DEFAULT_MAX_RETRIES))
            d = payload.get("defaults", {})
            self.defaults = ResourceRequest(d.get("machine"), d.get("disk_gb"), d.get("disk_class"))
            self.result_root = payload.get("result_root", "")
            self.started_at = ev.time
            for sample_id in self.sample_ids:
                self.records[sample_id] = TaskRecord(
                    sample_id=sample_id,
                    step_states={s: StepState.PENDING for s in self.steps},
                    timestamps=[(TaskState.QUEUED.value, ev.time)],
                )
            self.queue = QueueState(self.sample_ids)
        elif kind == "run_started":
            self.backend_name = payload.get("backend")
            self.pools = {k: int(v) for k, v in payload.get("pools", {}).items()}
            self.revert_running()
        elif kind == "task_leased":
            rec = self._record(ev.sample_id)
            self.queue.mark_leased(ev.sample_id, Fraction(str(payload["expires"])))
            rec.attempts = int(payload["attempt"])
            rec.state = TaskState.RUNNING
            rec.lease_expires = Fraction(str(payload["expires"]))
            rec.step_states = {s: StepState.PENDING for s in self.steps}
            rec.timestamps.append((TaskState.RUNNING.value, ev.time))
        elif kind == "lease_expired":
            rec = self._record(ev.sample_id)
            self.queue.expire(ev.sample_id)
            rec.state = TaskState.QUEUED
            rec.lease_expires = None
            rec.timestamps.append((TaskState.QUEUED.value, ev.time))
        elif kind == "step_started":
            rec = self._record(ev.sample_id)
            rec.step_states[payload["step"]] = StepState.RUNNING
            pool = payload.get("pool")
            if pool:
                self.pool_usage[pool] = self.pool_usage.get(pool, 0) + 1
        elif kind == "step_finished":
            rec = self._record(ev.sample_id)
            ok = payload.get("status") == "ok"
            rec.step_states[payload["step"]] = StepState.SUCCEEDED if ok else StepState.FAILED
            pool = payload.get("pool")
            if pool:
                self.pool_usage[pool] = self.pool_usage.get(pool, 0) - 1
        elif kind == "task_succeeded":
            rec = self._record(ev.sample_id)
            self.queue.ack(ev.sample_id)
            rec.state = TaskState.SUCCEEDED
            rec.lease_expires = None
            rec.step_states = {s: StepState.SUCCEEDED for s in rec.step_states}
            rec.timestamps.append((TaskState.SUCCEEDED.value, ev.time))
            if payload.get("duration_hours") is not None:
                self.completed_durations.append(Fraction(str(payload["duration_hours"])))
        elif kind == "task_failed":
            rec = self._record(ev.sample_id)
            if payload.get("retry"):
                self.queue.requeue(ev.sample_id)
                rec.state = TaskState.QUEUED
                rec.timestamps.append((TaskState.QUEUED.value, ev.time))
            else:
                self.queue.drop(ev.sample_id)
                rec.state = TaskState.EXHAUSTED
                rec.timestamps.append((TaskState.EXHAUSTED.value, ev.time))
            rec.lease_expires = None
        elif kind == "result_written":
            rec = self._record(ev.sample_id)
            uri = payload.get("uri")
            if uri and uri not in rec.result_uris:
                rec.result_uris.append(uri)
        elif kind == "job_finished":
            if payload.get("makespan_hours") is not None:
                self.makespan = Fraction(str(payload["makespan_hours"]))
        # unknown events are ignored so old logs stay replayable


def fold_events(events: list[Event]) -> OrchestratorState:
    """Pure replay: the state is a function of the log alone."""
    state = OrchestratorState()
    for ev in events:
        state.apply(ev)
    return state


def fold_events_checked(events: list[Event]) -> OrchestratorState:
    """Replay that reports the first semantically inconsistent record."""
    state = OrchestratorState()
    for ev in events:
        try:
            state.apply(ev)
        except (KeyError, ValueError, UnknownSample) as exc:
            raise CorruptLog(f"inconsistent event: {exc}", ev.seq, recovered=state) from exc
    return state


class Controller:
    """Single-writer orchestrator for one job.

    All mutations flow through `_emit`, which appends to the event log and
    then applies the event to the in-memory state with the same fold used by
    recovery.
    """

    def __init__(self, state: OrchestratorState, log: EventLog | None, clock: Callable[[], Fraction] | None,
                 lease_duration: Fraction = DEFAULT_LEASE_HOURS):
        self.state = state
        self.log = log
        self.clock = clock or (lambda: state.last_time)
        self.lease_duration = to_frac(lease_duration)

    # -- construction ---------------------------------------------------------

    @classmethod
    def submit(cls, job: Job, log: EventLog, clock: Callable[[], Fraction],
               lease_duration: Fraction = DEFAULT_LEASE_HOURS) -> "Controller":
        ctl = cls(OrchestratorState(), log, clock, lease_duration)
        steps = tuple(r.name for r in job.workflow.rules) if job.workflow else ()
        defaults = {
            "machine": job.defaults.machine,
            "disk_gb": job.defaults.disk_gb,
            "disk_class": job.defaults.disk_class,
        }
        ctl._emit(
            "job_submitted",
            job_id=job.job_id,
            payload={
                "workflow": job.workflow.name if job.workflow else None,
                "samples": list(job.sample_ids),
                "steps": list(steps),
                "max_retries": job.max_retries,
                "defaults": defaults,
                "result_root": job.result_root,
            },
        )
        return ctl

    @classmethod
    def resume(cls, log_path: str | Path, clock: Callable[[], Fraction],
               lease_duration: Fraction = DEFAULT_LEASE_HOURS, fsync: bool = False) -> "Controller":
        """Reopen a job after a crash: torn tails are truncated, state refolded."""
        log, events = EventLog.resume(log_path, fsync=fsync)
        state = fold_events_checked(events)
        if state.job_id is None:
            log.close()
            raise OrchestratorError(f"{log_path} holds no job")
        return cls(state, log, clock, lease_duration)

    # -- event plumbing -------------------------------------------------------

    def _emit(self, event: str, sample_id: str | None = None, job_id: str | None = None, payload: dict | None = None) -> None:
        if self.log is None:
            raise OrchestratorError("controller is detached (recovered read-only); no event log attached")
        record = self.log.append(
            time=self.clock(),
            job_id=job_id or self.state.job_id,
            event=event,
            sample_id=sample_id,
            payload=payload or {},
        )
        self.state.apply(record)

    # -- scheduling -----------------------------------------------------------

    def attach_run(self, backend: str, pools: dict[str, int]) -> None:
        """Mark a driver attaching: records pools and re-queues orphaned leases."""
        self._emit("run_started", payload={"backend": backend, "pools": dict(pools)})

    def lease_next(self) -> Lease | None:
        now = self.clock()
        for sample_id in self.state.queue.due(now):
            rec = self.state.records[sample_id]
            self._emit("lease_expired", sample_id, payload={"attempt": rec.attempts})
        while True:
            sample_id = self.state.queue.peek()
            if sample_id is None:
                return None
            rec = self.state.records[sample_id]
            if rec.attempts > self.state.max_retries:
                # retry budget consumed by lost leases; nothing left to grant
                self._emit(
                    "task_failed",
                    sample_id,
                    payload={"attempt": rec.attempts, "step": None,
                             "reason": "lease expired after final attempt", "retry": False},
                )
                continue
            expires = now + self.lease_duration
            self._emit(
                "task_leased",
                sample_id,
                payload={"attempt": rec.attempts + 1, "expires": frac_str(expires)},
            )
            return Lease(sample_id, rec.attempts, expires)

    def report_outcome(self, sample_id: str, outcome: TaskOutcome) -> TaskRecord:
        if sample_id not in self.state.records:
            raise UnknownSample(f"unknown sample {sample_id!r}")
        rec = self.state.records[sample_id]
        if sample_id not in self.state.queue.in_flight:
            if rec.state in (TaskState.SUCCEEDED, TaskState.EXHAUSTED):
                return rec  # stale report after redelivery; results are no-clobber
            raise NotInFlight(f"sample {sample_id!r} has no active lease")
        if outcome.succeeded:
            payload = {"attempt": rec.attempts}
            if outcome.duration_hours is not None:
                payload["duration_hours"] = frac_str(outcome.duration_hours)
            self._emit("task_succeeded", sample_id, payload=payload)
        else:
            retry = rec.attempts <= self.state.max_retries
            self._emit(
                "task_failed",
                sample_id,
                payload={"attempt": rec.attempts, "step": outcome.failed_step,
                         "reason": outcome.reason, "retry": retry},
            )
        return self.state.records[sample_id]

    def step_started(self, sample_id: str, step: str, pool: str | None = None) -> None:
        self._emit("step_started", sample_id, payload={"step": step, "pool": pool})

    def step_finished(self, sample_id: str, step: str, ok: bool, *, pool: str | None = None,
                      duration_hours: Fraction | None = None, reason: str | None = None,
                      peaks: dict | None = None, machine: str | None = None,
                      disk_gb: int | None = None, disk_class: str | None = None) -> None:
        payload = {"step": step, "pool": pool, "status": "ok" if ok else "fail"}
        if duration_hours is not None:
            payload["duration_hours"] = frac_str(duration_hours)
        if reason:
            payload["reason"] = reason
        if peaks:
            payload["peaks"] = peaks
        # record the placement so billing can be rebuilt from the log alone
        if machine is not None:
            payload["machine"] = machine
        if disk_gb is not None:
            payload["disk_gb"] = disk_gb
        if disk_class is not None:
            payload["disk_class"] = disk_class
        self._emit("step_finished", sample_id, payload=payload)

    def result_written(self, sample_id: str, uri: str, created: bool) -> None:
        self._emit("result_written", sample_id, payload={"uri": uri, "created": created})

    def finish(self, makespan: Fraction | None) -> None:
        payload = {"counts": self.state.counts()}
        if makespan is not None:
            payload["makespan_hours"] = frac_str(makespan)
        self._emit("job_finished", payload=payload)

    # -- queries ----------------------------------------------------------------

    @property
    def job_id(self) -> str:
        return self.state.job_id or ""

    def record(self, sample_id: str) -> TaskRecord:
        if sample_id not in self.state.records:
            raise UnknownSample(f"unknown sample {sample_id!r}")
        return self.state.records[sample_id]

    def unfinished(self) -> bool:
        return not self.state.finished()

    def status(self) -> JobStatus:
        state = self.state
        counts = state.counts()
        per_step: dict[str, dict[str, int]] = {}
        for step in state.steps:
            tally = {s.value: 0 for s in StepState}
            for rec in state.records.values():
                tally[rec.step_states.get(step, StepState.PENDING).value] += 1
            per_step[step] = tally
        now = self.clock()
        elapsed = now - (state.started_at or Fraction(0))
        remaining = counts[TaskState.QUEUED.value] + counts[TaskState.RUNNING.value] + counts[TaskState.FAILED.value]
        eta = None
        if state.completed_durations and remaining:
            window = state.completed_durations[-ETA_WINDOW:]
            mean = sum(window, Fraction(0)) / len(window)
            concurrency = sum(state.pools.values()) or 1
            eta = Fraction(math.ceil(Fraction(remaining, concurrency))) * mean
        elif not remaining:
            eta = Fraction(0)
        return JobStatus(
            job_id=state.job_id or "",
            total=len(state.records),
            counts=counts,
            per_step=per_step,
            elapsed_hours=elapsed,
            eta_hours=eta,
        )


def submit_job(
    workflow: Workflow,
    samples_path: str | Path,
    defaults: ResourceRequest,
    result_root: str,
    *,
    log: EventLog,
    clock: Callable[[], Fraction],
    job_id: str = "job",
    max_retries: int = DEFAULT_MAX_RETRIES,
    lease_duration: Fraction = DEFAULT_LEASE_HOURS,
) -> Controller:
    """Parse the sample list and enqueue every sample (all records Queued)."""
    sample_ids = tuple(parse_sample_file(samples_path))
    job = Job(
        job_id=job_id,
        workflow=workflow,
        sample_ids=sample_ids,
        defaults=defaults,
        max_retries=max_retries,
        result_root=result_root,
    )
    return Controller.submit(job, log, clock, lease_duration)


def recover(log_path: str | Path) -> Controller:
    """Rebuild controller state from an event log (read-only).

    Tasks that were Running when the writer died are reverted to Queued with
    their attempt counts preserved. A malformed record raises CorruptLog
    carrying the state recovered from the valid prefix.
    """
    events, corrupt = read_events(log_path)
    state = fold_events_checked(events)
    state.revert_running()
    ctl = Controller(state, log=None, clock=None)
    if corrupt is not None:
        raise CorruptLog(corrupt.reason, corrupt.line, recovered=ctl)
    return ctl


def job_status(log_path: str | Path) -> JobStatus:
    """Status summary computed from the event log alone (read-only)."""
    try:
        ctl = recover(log_path)
    except CorruptLog as exc:
        ctl = exc.recovered
    if ctl.state.job_id is None:
        from .errors import UnknownJob

        raise UnknownJob(f"no job recorded in {log_path}")
    return ctl.status()
