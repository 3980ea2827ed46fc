import textwrap
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gflow import errors
from gflow.backends import (
    LocalBackend,
    SimBackend,
    VirtualClock,
    WorkloadSpec,
    attempts_from_events,
    run_job,
    run_task_local,
    run_task_sim,
)
from gflow.events import read_events
from gflow.orchestrator import Job, OrchestratorState, TaskState
from gflow.store import ObjectStore, StoreUri
from gflow.workflow import ResourceRequest, compile_task, parse_workflow

ONE_STEP_WF = parse_workflow(
    "rule align:\n    output: [\"{sampleID}.bam\"]\n    shell: \"align {sampleID} > {output}\"\n"
)

DEFAULTS = ResourceRequest(machine="n2-standard-4", disk_gb=500, disk_class="standard")


def one_step_spec(duration=7, mem=12, disk=100, seed=1, failures=()):
    return WorkloadSpec.from_dict(
        {
            "seed": seed,
            "rules": {"align": {"duration_hours": duration, "peak_cpu": 2, "peak_mem_gb": mem, "peak_disk_gb": disk}},
            "failures": list(failures),
        }
    )


def make_job(samples, max_retries=3, workflow=ONE_STEP_WF, defaults=DEFAULTS):
    return Job("j1", workflow, tuple(samples), defaults, max_retries, "store://results")


def sim_backend(tmp_path, spec, catalog):
    return SimBackend(spec, catalog, ObjectStore(tmp_path / "store"))


def test_run_task_sim_success(sample_catalog):
    plan = compile_task(ONE_STEP_WF, "S1", DEFAULTS, "store://reference-data")
    clock = VirtualClock()
    out = run_task_sim(plan, one_step_spec(), clock, sample_catalog.machine("n2-standard-4"))
    assert out.succeeded
    assert out.steps[0].duration_hours == 7
    assert clock.now == Fraction(7)


def test_run_task_sim_out_of_memory(sample_catalog):
    plan = compile_task(ONE_STEP_WF, "S1", DEFAULTS, "store://reference-data")
    out = run_task_sim(plan, one_step_spec(mem=12), VirtualClock(), sample_catalog.machine("e2-standard-2"))
    assert not out.succeeded
    assert out.failure_reason == "OutOfMemory"
    assert out.failed_step == "align"


def test_run_task_sim_disk_full(sample_catalog):
    plan = compile_task(ONE_STEP_WF, "S1", ResourceRequest("n2-standard-4", 250, "standard"), "store://refs")
    out = run_task_sim(plan, one_step_spec(disk=300), VirtualClock(), sample_catalog.machine("n2-standard-4"))
    assert out.failure_reason == "DiskFull"


def test_run_task_sim_injected_fault(sample_catalog):
    spec = one_step_spec(failures=[{"sample": "S1", "attempts": [1]}])
    plan = compile_task(ONE_STEP_WF, "S1", DEFAULTS, "store://refs")
    machine = sample_catalog.machine("n2-standard-4")
    first = run_task_sim(plan, spec, VirtualClock(), machine, attempt=1)
    second = run_task_sim(plan, spec, VirtualClock(), machine, attempt=2)
    assert first.failure_reason == "InjectedFault"
    assert second.succeeded


def test_run_task_sim_incomplete_spec(sample_catalog):
    plan = compile_task(ONE_STEP_WF, "S1", DEFAULTS, "store://refs")
    with pytest.raises(errors.IncompleteSpec):
        run_task_sim(plan, WorkloadSpec.from_dict({"seed": 0, "rules": {}}), VirtualClock(),
                     sample_catalog.machine("n2-standard-4"))


def test_virtual_clock_monotone():
    clock = VirtualClock()
    clock.advance_to(Fraction(5))
    with pytest.raises(ValueError):
        clock.advance_to(Fraction(4))


def test_draws_deterministic_and_fixed_attempt_independent():
    spec = one_step_spec()
    a = spec.draw("S1", "align", 1)
    b = spec.draw("S1", "align", 1)
    c = spec.draw("S1", "align", 2)
    assert a == b == c  # fixed values do not vary with attempt


def test_distribution_draws_keyed_by_seed_and_attempt():
    data = {"seed": 1, "rules": {"align": {"duration_hours": {"dist": "uniform", "low": 5, "high": 9}}}}
    spec = WorkloadSpec.from_dict(data)
    d1 = spec.draw("S1", "align", 1)["duration_hours"]
    assert spec.draw("S1", "align", 1)["duration_hours"] == d1
    assert 5 <= d1 <= 9
    other_attempt = spec.draw("S1", "align", 2)["duration_hours"]
    other_seed = spec.with_seed(2).draw("S1", "align", 1)["duration_hours"]
    assert other_attempt != d1
    assert other_seed != d1


def test_workload_overrides_and_failures_parse():
    spec = WorkloadSpec.from_dict(
        {
            "seed": 3,
            "rules": {"align": {"duration_hours": 7, "peak_mem_gb": 12}},
            "overrides": [{"sample": "S2", "rule": "align", "duration_hours": 9}],
            "failures": [{"sample": "S3", "attempts": [1, 2], "step": "align"}],
        }
    )
    assert spec.draw("S1", "align", 1)["duration_hours"] == 7
    assert spec.draw("S2", "align", 1)["duration_hours"] == 9
    assert spec.failures["S3"].attempts == frozenset({1, 2})


def test_sim_makespan_four_tasks_capacity_two(tmp_path, sample_catalog):
    job = make_job([f"S{i}" for i in range(4)])
    backend = sim_backend(tmp_path, one_step_spec(), sample_catalog)
    report = run_job(job, backend, {"n2-standard-4": 2}, tmp_path / "job.jsonl")
    assert report.makespan_hours == Fraction(14)
    assert report.all_succeeded
    assert report.counts[TaskState.SUCCEEDED.value] == 4


def test_sim_retry_makespan(tmp_path, sample_catalog):
    job = make_job(["S1"], max_retries=1)
    spec = one_step_spec(failures=[{"sample": "S1", "attempts": [1]}])
    backend = sim_backend(tmp_path, spec, sample_catalog)
    report = run_job(job, backend, {"n2-standard-4": 1}, tmp_path / "job.jsonl")
    assert report.makespan_hours == Fraction(14)  # two sequential 7 h attempts
    assert report.final["S1"] is TaskState.SUCCEEDED
    assert len(report.attempts) == 2
    assert report.attempts[0].failure_reason == "InjectedFault"


def test_sim_terminal_states_only(tmp_path, sample_catalog):
    job = make_job(["S1", "S2"], max_retries=0)
    spec = one_step_spec(failures=[{"sample": "S2", "attempts": [1]}])
    backend = sim_backend(tmp_path, spec, sample_catalog)
    report = run_job(job, backend, {"n2-standard-4": 2}, tmp_path / "job.jsonl")
    assert report.counts[TaskState.RUNNING.value] == 0
    assert report.final["S1"] is TaskState.SUCCEEDED
    assert report.final["S2"] is TaskState.EXHAUSTED


def test_sim_results_written_once(tmp_path, sample_catalog):
    job = make_job(["S1", "S2", "S3"])
    backend = sim_backend(tmp_path, one_step_spec(), sample_catalog)
    run_job(job, backend, {"n2-standard-4": 3}, tmp_path / "job.jsonl")
    objects = backend.store.list_prefix(StoreUri("results", ""))
    assert len(objects) == 3
    assert {o.key for o in objects} == {f"S{i}/result.json" for i in (1, 2, 3)}


def test_sim_determinism_byte_identical(tmp_path, sample_catalog):
    spec = WorkloadSpec.from_dict(
        {"seed": 42, "rules": {"align": {"duration_hours": {"dist": "uniform", "low": 5, "high": 9},
                                          "peak_mem_gb": 12, "peak_disk_gb": 100}}}
    )
    logs = []
    for run in ("a", "b"):
        job = make_job([f"S{i}" for i in range(5)])
        backend = sim_backend(tmp_path / run, spec, sample_catalog)
        run_job(job, backend, {"n2-standard-4": 2}, tmp_path / f"{run}.jsonl")
        logs.append((tmp_path / f"{run}.jsonl").read_bytes())
    assert logs[0] == logs[1]


def test_sim_seed_changes_durations(tmp_path, sample_catalog):
    spec = WorkloadSpec.from_dict(
        {"seed": 42, "rules": {"align": {"duration_hours": {"dist": "uniform", "low": 5, "high": 9}}}}
    )
    samples = [f"S{i}" for i in range(5)]
    d_42 = [spec.draw(s, "align", 1)["duration_hours"] for s in samples]
    d_43 = [spec.with_seed(43).draw(s, "align", 1)["duration_hours"] for s in samples]
    assert d_42 != d_43


def test_pool_capacity_never_exceeded(tmp_path, sample_catalog):
    job = make_job([f"S{i}" for i in range(7)])
    backend = sim_backend(tmp_path, one_step_spec(duration=3), sample_catalog)
    run_job(job, backend, {"n2-standard-4": 2}, tmp_path / "job.jsonl")
    events, _ = read_events(tmp_path / "job.jsonl")
    state = OrchestratorState()
    for ev in events:
        state.apply(ev)
        for pool, used in state.pool_usage.items():
            assert 0 <= used <= state.pools.get(pool, 1)


def test_multi_step_per_rule_pools(tmp_path, sample_catalog):
    wf = parse_workflow(
        textwrap.dedent(
            """\
            rule fetch:
                output: ["{sampleID}.fastq"]
                resources: machine = "e2-standard-4"
                shell: "fetch {sampleID} > {output}"

            rule align:
                input: ["{sampleID}.fastq"]
                output: ["{sampleID}.bam"]
                resources: machine = "n2-standard-4"
                shell: "align {input} > {output}"
            """
        )
    )
    spec = WorkloadSpec.from_dict(
        {"seed": 0, "rules": {"fetch": {"duration_hours": 1}, "align": {"duration_hours": 2}}}
    )
    job = make_job(["S1", "S2"], workflow=wf)
    backend = sim_backend(tmp_path, spec, sample_catalog)
    report = run_job(job, backend, {"e2-standard-4": 2, "n2-standard-4": 1},
                     tmp_path / "job.jsonl")
    assert report.all_succeeded
    # S1: fetch 0-1, align 1-3; S2: fetch 0-1, align 3-5 (align pool is capacity 1)
    assert report.makespan_hours == Fraction(5)


@settings(max_examples=40, deadline=None)
@given(durations=st.lists(st.integers(min_value=1, max_value=12), min_size=1, max_size=8),
       capacity=st.integers(min_value=1, max_value=4))
def test_makespan_lower_bound(tmp_path_factory, sample_catalog, durations, capacity):
    tmp = tmp_path_factory.mktemp("sim")
    samples = [f"S{i}" for i in range(len(durations))]
    spec = WorkloadSpec.from_dict(
        {
            "seed": 0,
            "rules": {"align": {"duration_hours": 1}},
            "overrides": [
                {"sample": s, "rule": "align", "duration_hours": d} for s, d in zip(samples, durations)
            ],
        }
    )
    job = make_job(samples)
    backend = sim_backend(tmp, spec, sample_catalog)
    report = run_job(job, backend, {"n2-standard-4": capacity}, tmp / "job.jsonl")
    total = sum(durations)
    bound = max(Fraction(total, capacity), Fraction(max(durations)))
    assert report.makespan_hours >= bound


def test_attempts_from_events_reconstruction(tmp_path, sample_catalog):
    job = make_job(["S1"], max_retries=1)
    spec = one_step_spec(failures=[{"sample": "S1", "attempts": [1]}])
    backend = sim_backend(tmp_path, spec, sample_catalog)
    run_job(job, backend, {"n2-standard-4": 1}, tmp_path / "job.jsonl")
    events, _ = read_events(tmp_path / "job.jsonl")
    attempts = attempts_from_events(events)
    assert [(a.attempt, a.succeeded) for a in attempts] == [(1, False), (2, True)]
    assert all(a.steps[0].machine == "n2-standard-4" for a in attempts)
    assert all(a.steps[0].duration_hours == 7 for a in attempts)


# ---------------------------------------------------------------------------
# local backend


LOCAL_WF = parse_workflow(
    textwrap.dedent(
        """\
        rule download:
            output: ["{sampleID}.fastq"]
            shell: "echo raw-{sampleID} > {output}"

        rule align:
            input: ["{sampleID}.fastq"]
            output: ["{sampleID}.bam"]
            shell: "tr a-z A-Z < {input} > {output}"

        rule refine:
            input: ["{sampleID}.bam"]
            output: ["{sampleID}.final.bam"]
            shell: "cat {input} > {output} && echo done >> {output}"
        """
    )
)

LOCAL_DEFAULTS = ResourceRequest(machine="e2-standard-16", disk_gb=10, disk_class="balanced")


def test_run_task_local_three_steps(tmp_path):
    plan = compile_task(LOCAL_WF, "S1", LOCAL_DEFAULTS, tmp_path / "disk" / "reference")
    out = run_task_local(plan, tmp_path / "disk", log_dir=tmp_path / "logs")
    assert out.succeeded
    assert len(out.steps) == 3
    assert all(s.duration_hours > 0 for s in out.steps)
    assert (tmp_path / "disk" / "S1.final.bam").read_text() == "RAW-S1\ndone\n"
    assert (tmp_path / "logs" / "align.err").exists()


def test_run_task_local_fail_fast(tmp_path):
    wf = parse_workflow(
        textwrap.dedent(
            """\
            rule one:
                output: ["a-{sampleID}"]
                shell: "echo hi > {output}"

            rule two:
                input: ["a-{sampleID}"]
                output: ["b-{sampleID}"]
                shell: "exit 1"

            rule three:
                input: ["b-{sampleID}"]
                output: ["c-{sampleID}"]
                shell: "echo never > {output}"
            """
        )
    )
    plan = compile_task(wf, "S1", LOCAL_DEFAULTS, tmp_path / "refs")
    out = run_task_local(plan, tmp_path / "disk")
    assert not out.succeeded
    assert out.failed_step == "two"
    assert out.failure_reason == "exit 1"
    assert len(out.steps) == 2  # step three never ran
    assert not (tmp_path / "disk" / "c-S1").exists()


def test_run_task_local_disk_quota(tmp_path):
    wf = parse_workflow(
        "rule blowup:\n    output: [\"big-{sampleID}\"]\n    shell: \"head -c 2048 /dev/zero > {output}\"\n"
    )
    plan = compile_task(wf, "S1", ResourceRequest(disk_gb=0), tmp_path / "refs")
    out = run_task_local(plan, tmp_path / "disk")
    assert not out.succeeded
    assert out.failure_reason == "DiskQuotaExceeded"


def test_run_task_local_timeout(tmp_path):
    wf = parse_workflow("rule slow:\n    output: [\"x-{sampleID}\"]\n    shell: \"sleep 30\"\n")
    plan = compile_task(wf, "S1", LOCAL_DEFAULTS, tmp_path / "refs")
    out = run_task_local(plan, tmp_path / "disk", step_timeout=0.3)
    assert not out.succeeded
    assert out.failure_reason == "Timeout"


def test_run_task_local_stages_references(tmp_path):
    store = ObjectStore(tmp_path / "store")
    store.create_bucket("refs")
    store.put(StoreUri("refs", "hg38.fa"), b">chr1\nACGT\n")
    wf = parse_workflow(
        "rule use_ref:\n    input: [\"{reference}/hg38.fa\"]\n    output: [\"o-{sampleID}\"]\n"
        "    shell: \"wc -c < {input} > {output}\"\n"
    )
    disk = tmp_path / "disk"
    plan = compile_task(wf, "S1", LOCAL_DEFAULTS, disk / "reference")
    out = run_task_local(plan, disk, refs=(store, StoreUri("refs", "")))
    assert out.succeeded
    assert (disk / "o-S1").read_text().strip() == "11"


def test_run_job_local_end_to_end(tmp_path):
    store_root = tmp_path / "store"
    backend = LocalBackend(
        store=ObjectStore(store_root),
        workdisk_root=tmp_path / "disks",
        log_root=tmp_path / "logs",
    )
    job = Job("jl", LOCAL_WF, ("S1", "S2"), LOCAL_DEFAULTS, 1, "store://results")
    report = run_job(job, backend, {"local": 2}, tmp_path / "job.jsonl")
    assert report.all_succeeded
    objects = backend.store.list_prefix(StoreUri("results", ""))
    assert {o.key for o in objects} == {"S1/S1.final.bam", "S2/S2.final.bam"}
    assert (tmp_path / "logs" / "S1" / "download.out").exists()


def test_run_job_refuses_existing_log(tmp_path, sample_catalog):
    job = make_job(["S1"])
    backend = sim_backend(tmp_path, one_step_spec(), sample_catalog)
    run_job(job, backend, {"n2-standard-4": 1}, tmp_path / "job.jsonl")
    with pytest.raises(errors.OrchestratorError, match="resume"):
        run_job(job, backend, {"n2-standard-4": 1}, tmp_path / "job.jsonl")


def test_run_job_local_retries_flaky_step(tmp_path):
    # fails on the first attempt, succeeds once the marker file exists
    wf = parse_workflow(
        "rule flaky:\n"
        "    output: [\"out-{sampleID}\"]\n"
        "    shell: \"if test -f ../marker-{sampleID}; then echo ok > {output}; else touch ../marker-{sampleID}; exit 1; fi\"\n"
    )
    backend = LocalBackend(store=ObjectStore(tmp_path / "store"), workdisk_root=tmp_path / "disks")
    job = Job("jf", wf, ("S1",), LOCAL_DEFAULTS, 2, "store://results")
    report = run_job(job, backend, {"local": 1}, tmp_path / "job.jsonl")
    assert report.final["S1"] is TaskState.SUCCEEDED
    assert len(report.attempts) == 2
