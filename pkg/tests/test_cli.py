import json

import pytest
from click.testing import CliRunner

from gflow.cli import main


@pytest.fixture()
def runner():
    return CliRunner()


def _invoke(runner, args, **kwargs):
    return runner.invoke(main, args, catch_exceptions=False, **kwargs)


def _lifecycle_args(toy_files, extra):
    root = str(toy_files["dir"] / "cli-root")
    return ["--store-root", root] + extra


def test_plan_valid_workflow(runner, toy_files):
    result = _invoke(runner, ["plan", str(toy_files["workflow"]), "--sample", "S7"])
    assert result.exit_code == 0
    data = json.loads(result.output)
    assert data["sample_id"] == "S7"
    assert [s["rule"] for s in data["steps"]] == ["download", "align", "refine"]
    assert data["edges"] == [["download", "align"], ["align", "refine"]]
    assert all("S7" in s["command"] for s in data["steps"])


def test_plan_syntax_error_cites_line(runner, tmp_path):
    bad = tmp_path / "bad.workflow"
    bad.write_text("rule a:\n    shell: \"ok\"\n\n???\n")
    result = runner.invoke(main, ["plan", str(bad)])
    assert result.exit_code == 2
    assert "line 4" in result.output


def test_plan_missing_file_io_exit_code(runner, tmp_path):
    result = runner.invoke(main, ["plan", str(tmp_path / "missing.workflow")])
    assert result.exit_code == 3


def test_sim_lifecycle_via_cli(runner, toy_files):
    wf, samples, workload = str(toy_files["workflow"]), str(toy_files["samples"]), str(toy_files["workload"])

    result = _invoke(runner, _lifecycle_args(toy_files, ["create", wf, "--project", "cli-demo"]))
    assert result.exit_code == 0, result.output
    assert "cli-demo" in result.output

    result = _invoke(runner, _lifecycle_args(toy_files, [
        "optimize", wf, "--project", "cli-demo", "--samples", samples, "--workload", workload,
    ]))
    assert result.exit_code == 0, result.output
    assert "optimized parameters" in result.output

    optparams = toy_files["dir"] / "cli-root" / "cli-demo" / "optparams.json"
    result = _invoke(runner, _lifecycle_args(toy_files, [
        "run", wf, "--project", "cli-demo", "--samples", samples, "--workload", workload,
        "--optparams", str(optparams),
    ]))
    assert result.exit_code == 0, result.output
    assert "cost report" in result.output
    assert "results: store://cli-demo-results" in result.output

    result = _invoke(runner, _lifecycle_args(toy_files, ["status", "toy-run", "--project", "cli-demo"]))
    assert result.exit_code == 0, result.output
    assert "Succeeded=5" in result.output

    result = _invoke(runner, _lifecycle_args(toy_files, ["cost", "cli-demo"]))
    assert result.exit_code == 0, result.output
    assert "mean per sample" in result.output

    dest = toy_files["dir"] / "downloads"
    result = _invoke(runner, _lifecycle_args(toy_files, [
        "fetch", "store://cli-demo-results", str(dest),
    ]))
    assert result.exit_code == 0, result.output
    assert "(copied 5, skipped 0)" in result.output
    result = _invoke(runner, _lifecycle_args(toy_files, [
        "fetch", "store://cli-demo-results", str(dest),
    ]))
    assert "(copied 0, skipped 5)" in result.output

    result = _invoke(runner, _lifecycle_args(toy_files, ["teardown", "cli-demo"]))
    assert result.exit_code == 0, result.output
    # cost still answers from the preserved record
    result = _invoke(runner, _lifecycle_args(toy_files, ["cost", "cli-demo"]))
    assert result.exit_code == 0, result.output
    assert "aggregate" in result.output

    result = runner.invoke(main, _lifecycle_args(toy_files, ["teardown", "cli-demo"]))
    assert result.exit_code == 3  # already gone


def test_run_without_optparams_uses_defaults(runner, toy_files):
    wf, samples, workload = str(toy_files["workflow"]), str(toy_files["samples"]), str(toy_files["workload"])
    _invoke(runner, _lifecycle_args(toy_files, ["create", wf, "--project", "plain"]))
    result = _invoke(runner, _lifecycle_args(toy_files, [
        "run", wf, "--project", "plain", "--samples", samples, "--workload", workload,
    ]))
    assert result.exit_code == 0, result.output
    log = toy_files["dir"] / "cli-root" / "plain" / "logs" / "toy-run.jsonl"
    machines = set()
    for line in log.read_text().splitlines():
        record = json.loads(line)
        if record["event"] == "step_finished":
            machines.add(record["payload"]["machine"])
    assert machines == {"e2-standard-16"}


def test_run_partial_failure_exit_code(runner, toy_files):
    workload = {
        "seed": 1,
        "rules": {"download": {"duration_hours": 1}, "align": {"duration_hours": 1},
                  "refine": {"duration_hours": 1}},
        "failures": [{"sample": "S2", "attempts": [1, 2, 3, 4], "step": "align"}],
    }
    workload_path = toy_files["dir"] / "failing.json"
    workload_path.write_text(json.dumps(workload))
    wf, samples = str(toy_files["workflow"]), str(toy_files["samples"])
    _invoke(runner, _lifecycle_args(toy_files, ["create", wf, "--project", "flaky"]))
    result = runner.invoke(main, _lifecycle_args(toy_files, [
        "run", wf, "--project", "flaky", "--samples", samples, "--workload", str(workload_path),
    ]))
    assert result.exit_code == 1
    assert "exhausted" in result.output


def test_optimize_before_create_is_state_error(runner, toy_files):
    wf, samples, workload = str(toy_files["workflow"]), str(toy_files["samples"]), str(toy_files["workload"])
    result = runner.invoke(main, _lifecycle_args(toy_files, [
        "optimize", wf, "--project", "ghost", "--samples", samples, "--workload", workload,
    ]))
    assert result.exit_code == 3
    assert "create" in result.output


def test_sim_backend_requires_workload(runner, toy_files):
    wf, samples = str(toy_files["workflow"]), str(toy_files["samples"])
    _invoke(runner, _lifecycle_args(toy_files, ["create", wf, "--project", "nowl"]))
    result = runner.invoke(main, _lifecycle_args(toy_files, [
        "run", wf, "--project", "nowl", "--samples", samples,
    ]))
    assert result.exit_code == 2
    assert "workload" in result.output


def test_compare_subcommand(runner):
    result = _invoke(runner, ["compare", "7.34", "1.72"])
    assert result.output.strip() == "77%"


def test_store_root_from_environment(runner, toy_files, monkeypatch):
    root = toy_files["dir"] / "env-root"
    result = runner.invoke(
        main,
        ["create", str(toy_files["workflow"]), "--project", "envproj"],
        env={"GFLOW_STORE_ROOT": str(root)},
        auto_envvar_prefix="GFLOW",
        catch_exceptions=False,
    )
    assert result.exit_code == 0, result.output
    assert (root / "envproj" / "project.json").exists()


def _step_machines(log_path):
    machines = set()
    for line in log_path.read_text().splitlines():
        record = json.loads(line)
        if record["event"] == "step_finished":
            machines.add(record["payload"].get("machine"))
    return machines


def test_config_file_supplies_defaults(runner, toy_files):
    cfg = toy_files["dir"] / "gflow.json"
    cfg.write_text(json.dumps({"default_machine": "n2-highmem-16", "test_samples": 2}))
    wf, samples, workload = str(toy_files["workflow"]), str(toy_files["samples"]), str(toy_files["workload"])
    args = ["--config", str(cfg)] + _lifecycle_args(toy_files, ["create", wf, "--project", "cfg"])
    assert _invoke(runner, args).exit_code == 0
    args = ["--config", str(cfg)] + _lifecycle_args(toy_files, [
        "run", wf, "--project", "cfg", "--samples", samples, "--workload", workload,
    ])
    result = _invoke(runner, args)
    assert result.exit_code == 0, result.output
    log = toy_files["dir"] / "cli-root" / "cfg" / "logs" / "toy-run.jsonl"
    assert _step_machines(log) == {"n2-highmem-16"}


def test_flag_beats_config_file(runner, toy_files):
    cfg = toy_files["dir"] / "gflow.json"
    cfg.write_text(json.dumps({"default_machine": "n2-highmem-16"}))
    wf, samples, workload = str(toy_files["workflow"]), str(toy_files["samples"]), str(toy_files["workload"])
    _invoke(runner, ["--config", str(cfg)] + _lifecycle_args(toy_files, ["create", wf, "--project", "flag"]))
    result = _invoke(runner, ["--config", str(cfg)] + _lifecycle_args(toy_files, [
        "run", wf, "--project", "flag", "--samples", samples, "--workload", workload,
        "--default-machine", "e2-standard-8",
    ]))
    assert result.exit_code == 0, result.output
    log = toy_files["dir"] / "cli-root" / "flag" / "logs" / "toy-run.jsonl"
    assert _step_machines(log) == {"e2-standard-8"}
