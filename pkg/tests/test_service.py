import csv

import numpy as np
import pytest

from partdescent.config import load_config
from partdescent.database import ExperimentRun, RunStatus, get_db
from partdescent.errors import ConfigError
from partdescent.exporter import file_sha256, read_components_csv, read_trace_csv
from partdescent.main import main
from partdescent.service import audit_run, compare_modes, run_experiment, run_many


def _config(tmp_path, preset="path5", **overrides):
    overrides.setdefault("output.dir", str(tmp_path / "out"))
    overrides.setdefault("stop.step_tol", 0.0)
    return load_config(preset=preset, overrides=overrides)


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_async_run_writes_every_output(tmp_path):
    report = run_experiment(_config(tmp_path), registry=False)
    out = tmp_path / "out"
    for name in ("trace.csv", "components.csv", "summary.txt", "config.yaml", "instance.json"):
        assert (out / name).exists()

    rows = _read_csv(out / "trace.csv")
    assert list(rows[0]) == ["t", "block", "step_norm", "V", "V_gap", "sim_time"]
    assert len(rows) == report.iterations + 1
    assert rows[0]["t"] == "0" and rows[0]["block"] == ""
    assert report.tracked_blocks == [0, 4]
    assert report.components.shape == (report.iterations + 1, 2)
    np.testing.assert_array_equal(report.normalized_t[:3], [0.0, 0.2, 0.4])


def test_v_gap_column_is_v_minus_final_v(tmp_path):
    run_experiment(_config(tmp_path), registry=False)
    rows = _read_csv(tmp_path / "out" / "trace.csv")
    values = np.array([float(r["V"]) for r in rows])
    gaps = np.array([float(r["V_gap"]) for r in rows])
    np.testing.assert_allclose(gaps, values - values[-1], rtol=0, atol=1e-9 * max(1.0, abs(values).max()))
    assert np.all(gaps >= -1e-9)


def test_summary_records_seeds_and_checks(tmp_path):
    report = run_experiment(_config(tmp_path), registry=False)
    summary = dict(
        line.split(": ", 1) for line in (tmp_path / "out" / "summary.txt").read_text().splitlines()
    )
    assert summary["sim_seed"] == "5"
    assert summary["descent_violations"] == "0"
    assert summary["trace_sha256"] == report.trace_sha256
    assert "limit point" in summary["V_star"]
    assert float(summary["V_final"]) == report.final_value


def test_runs_are_bit_identical(tmp_path):
    first = run_experiment(_config(tmp_path, **{"output.dir": str(tmp_path / "a")}), registry=False)
    second = run_experiment(_config(tmp_path, **{"output.dir": str(tmp_path / "b")}), registry=False)
    for name in ("trace.csv", "components.csv", "summary.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert first.trace_sha256 == second.trace_sha256


def test_trivial_preset_has_a_flat_trace(tmp_path):
    report = run_experiment(_config(tmp_path, preset="trivial"), registry=False)
    assert np.all(report.values == 0.0)
    assert report.residual == 0.0


def test_centralized_replay_of_an_async_trace(tmp_path):
    async_report = run_experiment(_config(tmp_path, **{"output.dir": str(tmp_path / "async")}), registry=False)
    replay = run_experiment(
        _config(tmp_path, **{
            "mode": "centralized",
            "schedule.replay_trace": str(tmp_path / "async" / "trace.csv"),
            "output.dir": str(tmp_path / "replay"),
        }),
        registry=False,
    )
    assert replay.trace.blocks() == async_report.trace.blocks()
    np.testing.assert_array_equal(replay.values, async_report.values)


def test_tracked_blocks_must_exist(tmp_path):
    with pytest.raises(ConfigError):
        run_experiment(_config(tmp_path, **{"output.track_blocks": [7]}), registry=False)


def test_uniform_start_is_inside_the_box(tmp_path):
    report = run_experiment(_config(tmp_path, **{"start.kind": "uniform", "start.seed": 3}), registry=False)
    x0 = report.trace.x0
    assert np.all(x0 >= -30.0) and np.all(x0 <= 20.0)
    assert np.any(x0 != 0.0)


def test_compare_modes_on_the_path_graph(tmp_path):
    report = compare_modes(_config(tmp_path), registry=False)
    assert report.max_state_deviation <= 1e-12
    assert report.max_value_deviation == 0.0
    rows = _read_csv(tmp_path / "out" / "compare.csv")
    assert len(rows) == report.iterations + 1


def test_compare_modes_without_iterations(tmp_path):
    report = compare_modes(_config(tmp_path, **{"stop.max_iters": 0}), registry=False)
    assert report.iterations == 0
    assert report.max_state_deviation == 0.0


def test_event_log_is_written(tmp_path):
    run_experiment(_config(tmp_path, **{"sim.event_log": True, "stop.max_iters": 20}), registry=False)
    lines = (tmp_path / "out" / "events.log").read_text().splitlines()
    assert sum(" timer_fire " in line for line in lines) == 20


def test_saved_trace_loads_back(tmp_path):
    report = run_experiment(_config(tmp_path), registry=False)
    loaded = read_trace_csv(tmp_path / "out" / "trace.csv")
    assert loaded.mode == "async"
    assert loaded.blocks() == report.trace.blocks()
    np.testing.assert_array_equal(loaded.values(), report.values)
    blocks, history = read_components_csv(tmp_path / "out" / "components.csv")
    assert blocks == [0, 4]
    np.testing.assert_array_equal(history, report.components)


def test_audit_passes_on_a_clean_run(tmp_path):
    run_experiment(_config(tmp_path, **{"stop.max_iters": 200}), registry=False)
    outcome = audit_run(tmp_path / "out")
    assert outcome.passed, outcome.checks
    assert set(outcome.checks) == {"descent", "replay_values", "replay_components", "consistency"}


def test_audit_detects_a_tampered_trace(tmp_path):
    run_experiment(_config(tmp_path, **{"stop.max_iters": 100}), registry=False)
    path = tmp_path / "out" / "trace.csv"
    lines = path.read_text().splitlines()
    fields = lines[50].split(",")
    fields[3] = repr(float(fields[3]) + 1.0)
    lines[50] = ",".join(fields)
    path.write_text("\n".join(lines) + "\n")
    outcome = audit_run(tmp_path / "out")
    assert not outcome.passed
    assert not outcome.checks["replay_values"][0]


def test_registry_records_completed_runs(tmp_path, registry):
    report = run_experiment(_config(tmp_path), registry=True)
    session = next(get_db())
    row = session.query(ExperimentRun).filter(ExperimentRun.id == report.run_id).one()
    assert row.status == RunStatus.COMPLETED
    assert row.kind == "run"
    assert row.trace_sha256 == file_sha256(tmp_path / "out" / "trace.csv")
    assert row.iterations == report.iterations
    assert row.violations == 0
    session.close()


def test_registry_records_failures(tmp_path, registry):
    missing = tmp_path / "nope.csv"
    with pytest.raises(ConfigError):
        run_experiment(_config(tmp_path, **{"mode": "centralized", "schedule.replay_trace": str(missing)}),
                       registry=True)
    session = next(get_db())
    row = session.query(ExperimentRun).order_by(ExperimentRun.id.desc()).first()
    assert row.status == RunStatus.FAILED
    assert "not found" in row.error_message
    session.close()


def test_run_many_uses_one_folder_per_seed(tmp_path):
    config = _config(tmp_path, **{"stop.max_iters": 50})
    reports = run_many(config, [1, 2], workers=1, registry=False)
    assert [r.output_dir for r in reports] == [tmp_path / "out" / "seed1", tmp_path / "out" / "seed2"]
    assert reports[0].trace.blocks() != reports[1].trace.blocks()


def test_cli_exit_codes(tmp_path):
    out = str(tmp_path / "cli")
    assert main(["run", "--preset", "path5", "--max-iters", "30", "--out", out, "--no-registry"]) == 0
    assert main(["audit", out]) == 0
    assert main(["run", "--preset", "path5", "--strategy", "newton", "--out", out, "--no-registry"]) == 1
    assert main(["generate", "--preset", "path5", "--out", str(tmp_path / "gen")]) == 0
    assert (tmp_path / "gen" / "instance.json").exists()
    assert (tmp_path / "gen" / "graph.edges").exists()


@pytest.mark.parametrize("argv", [
    ["run", "--preset", "path5", "--mode", "parallel", "--no-registry"],
    ["run", "--preset", "path5", "--nodes", "abc", "--no-registry"],
    ["run", "--preset", "path5", "--no-such-flag", "--no-registry"],
    ["audit"],
    [],
])
def test_cli_usage_errors_exit_as_config_errors(argv):
    assert main(argv) == 1


def test_cli_audit_failure_exit_code(tmp_path):
    out = tmp_path / "cli"
    assert main(["run", "--preset", "path5", "--max-iters", "30", "--out", str(out), "--no-registry"]) == 0
    path = out / "trace.csv"
    lines = path.read_text().splitlines()
    fields = lines[-1].split(",")
    fields[3] = repr(float(fields[3]) - 5.0)
    lines[-1] = ",".join(fields)
    path.write_text("\n".join(lines) + "\n")
    assert main(["audit", str(out)]) == 3


@pytest.mark.slow
def test_paper_preset_end_to_end(tmp_path):
    report = run_experiment(_config(tmp_path, preset="paper", strategy="lipschitz"), registry=False)
    assert np.all(np.diff(report.values) <= 1e-9)
    assert report.gaps[-1] == 0.0 and np.all(report.gaps >= -1e-6)
    assert report.residual <= 1e-6
    assert report.violations == []


@pytest.mark.slow
def test_paper_preset_as_shipped(tmp_path):
    config = load_config(preset="paper", overrides={"output.dir": str(tmp_path / "paper")})
    assert config.strategy == "scaled_identity:alpha=0.01"
    report = run_experiment(config, registry=False)
    n = len(report.trace.x0)
    assert np.all(np.diff(report.values) <= 1e-9)
    assert report.residual <= 1e-6
    assert abs(report.values[-1] - report.values[-(10 * n + 1)]) <= 1e-10
    if report.violations:
        assert report.dominance_failures
    summary = dict(
        line.split(": ", 1) for line in (tmp_path / "paper" / "summary.txt").read_text().splitlines()
    )
    assert int(summary["descent_violations"]) == len(report.violations)
    assert int(summary["dominance_failures"]) == len(report.dominance_failures)


@pytest.mark.slow
def test_paper_preset_comparison(tmp_path):
    report = compare_modes(_config(tmp_path, preset="paper"), registry=False)
    assert report.max_state_deviation <= 1e-12


@pytest.mark.slow
def test_tracked_components_settle_on_the_centralized_limit(tmp_path):
    report = run_experiment(_config(tmp_path, preset="paper", strategy="lipschitz"), registry=False)
    long_run = run_experiment(
        _config(tmp_path, preset="paper", strategy="lipschitz", mode="centralized",
                **{"schedule.replay_trace": str(tmp_path / "out" / "trace.csv"), "output.dir": str(tmp_path / "cd")}),
        registry=False,
    )
    np.testing.assert_allclose(report.components[-1], long_run.components[-1], atol=1e-4)
    tail = report.components[-10 * 50:]
    assert np.ptp(tail, axis=0).max() <= 1e-4
