from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from rich.console import Console

from partdescent.config import RunConfig, config_from_dict, read_yaml, save_config
from partdescent.database import ExperimentRun, RunStatus, get_db, init_db
from partdescent.descent import BlockSchedule, RunTrace, StopCriteria, descent_monitor, run_cd
from partdescent.errors import AuditError, ConfigError
from partdescent.exporter import RunExporter, file_sha256, read_components_csv, read_trace_csv
from partdescent.local_model import WeightStrategy, dominance_report
from partdescent.partition import (
    CommGraph,
    complete_graph,
    erdos_renyi_connected,
    path_graph,
    read_edge_list,
)
from partdescent.problem import (
    BoxIndicator,
    PartitionedProblem,
    aggregate_value,
    feasible_start,
    generate_paper_instance,
    load_instance,
    save_instance,
    stationarity_residual,
    zero_instance,
)
from partdescent.simulator import compare_traces, replay_centralized, run_simulation

console = Console()

VSTAR_NOTE = "final iterate of this run (proxy for the limit point)"


@dataclass
class MetricsReport:
    trace: RunTrace
    values: np.ndarray
    gaps: np.ndarray
    normalized_t: np.ndarray
    tracked_blocks: List[int]
    components: np.ndarray
    residual: float
    violations: list
    dominance_failures: List[int]
    final_value_direct: float
    output_dir: Optional[Path] = None
    trace_sha256: Optional[str] = None
    run_id: Optional[int] = None

    @property
    def final_value(self) -> float:
        return float(self.values[-1])

    @property
    def iterations(self) -> int:
        return len(self.trace)


@dataclass
class DeviationReport:
    iterations: int
    state_deviation: np.ndarray
    value_deviation: np.ndarray
    output_dir: Optional[Path] = None
    run_id: Optional[int] = None

    @property
    def max_state_deviation(self) -> float:
        return float(self.state_deviation.max()) if self.state_deviation.size else 0.0

    @property
    def max_value_deviation(self) -> float:
        return float(self.value_deviation.max()) if self.value_deviation.size else 0.0


@dataclass
class AuditOutcome:
    checks: Dict[str, tuple] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(ok for ok, _ in self.checks.values())


# --- building blocks --------------------------------------------------------

def build_graph(config: RunConfig) -> CommGraph:
    section = config.graph
    if section.kind == "erdos_renyi":
        return erdos_renyi_connected(section.nodes, section.p, section.seed)
    if section.kind == "path":
        return path_graph(section.nodes)
    if section.kind == "complete":
        return complete_graph(section.nodes)
    return read_edge_list(Path(section.file))


def build_problem(config: RunConfig) -> PartitionedProblem:
    section = config.instance
    if section.file:
        return load_instance(Path(section.file))
    graph = build_graph(config)
    bounds = (section.lower, section.upper)
    if section.kind == "zero":
        return zero_instance(graph, bounds)
    return generate_paper_instance(
        graph, section.seed, bounds, section.shift, block_dims=[section.block_dim] * graph.num_nodes
    )


def build_start(config: RunConfig, problem: PartitionedProblem) -> np.ndarray:
    """Zeros (box midpoints where 0 is infeasible) or uniform draws inside each box."""
    x0 = feasible_start(problem)
    if config.start.kind == "uniform":
        rng = np.random.default_rng(config.start.seed)
        for i, reg in enumerate(problem.regularizers):
            if isinstance(reg, BoxIndicator):
                x0[problem.layout.block_slice(i)] = rng.uniform(reg.lower, reg.upper)
    return x0


def check_tracked(config: RunConfig, problem: PartitionedProblem) -> List[int]:
    blocks = [int(b) for b in config.output.track_blocks]
    bad = [b for b in blocks if not 0 <= b < problem.num_blocks]
    if bad:
        raise ConfigError(f"Tracked blocks {bad} do not exist (the problem has {problem.num_blocks} blocks)")
    return blocks


def execute(config: RunConfig, problem: PartitionedProblem, x0: np.ndarray, strategy: WeightStrategy,
            output_dir: Optional[Path] = None, show_progress: bool = False) -> RunTrace:
    stop = StopCriteria(max_iters=config.stop.max_iters, step_tol=config.stop.step_tol)
    if config.mode == "async":
        event_log = None
        if config.sim.event_log and output_dir is not None:
            event_log = Console(file=open(Path(output_dir) / "events.log", "w", encoding="utf-8"),
                                width=200, color_system=None, log_path=False)
        try:
            return run_simulation(problem, x0, config.sim.seed, strategy, stop,
                                  rate=config.sim.rate, audit=config.sim.audit, event_log=event_log)
        finally:
            if event_log is not None:
                event_log.file.close()

    if config.schedule.replay_trace:
        blocks = read_trace_csv(Path(config.schedule.replay_trace)).blocks()
        return replay_centralized(problem, x0, blocks, strategy)
    schedule = BlockSchedule.uniform(config.schedule.seed, config.schedule.probabilities)
    return run_cd(problem, x0, schedule, strategy, stop, show_progress=show_progress)


def compute_metrics(problem: PartitionedProblem, trace: RunTrace, strategy: WeightStrategy,
                    tracked_blocks: Sequence[int]) -> MetricsReport:
    values = trace.values()
    gaps = values - values[-1]
    return MetricsReport(
        trace=trace,
        values=values,
        gaps=gaps,
        normalized_t=np.arange(len(values)) / problem.num_blocks,
        tracked_blocks=list(tracked_blocks),
        components=trace.component_history(problem.layout, tracked_blocks),
        residual=stationarity_residual(problem, trace.x_final, strategy),
        violations=descent_monitor(trace, problem),
        dominance_failures=dominance_report(problem, trace.x0, strategy),
        final_value_direct=aggregate_value(problem, trace.x_final),
    )


def _summary_entries(config: RunConfig, problem: PartitionedProblem, report: MetricsReport) -> dict:
    trace = report.trace
    entries = {
        "mode": config.mode,
        "preset": config.preset or "",
        "strategy": config.strategy,
        "graph": f"{config.graph.kind} nodes={problem.num_blocks} p={config.graph.p} seed={config.graph.seed}",
        "instance": f"{config.instance.kind} seed={config.instance.seed} shift={config.instance.shift} "
                    f"bounds=[{config.instance.lower}, {config.instance.upper}]",
        "start": f"{config.start.kind} seed={config.start.seed}",
        "sim_seed": config.sim.seed if config.mode == "async" else "",
        "schedule_seed": config.schedule.seed if config.mode == "centralized" else "",
        "iterations": len(trace),
        "stop_reason": trace.stop_reason,
        "V_initial": float(report.values[0]),
        "V_final": report.final_value,
        "V_final_direct": report.final_value_direct,
        "V_drift": report.final_value_direct - report.final_value,
        "V_star": VSTAR_NOTE,
        "stationarity_residual": report.residual,
        "descent_violations": len(report.violations),
        "dominance_failures": len(report.dominance_failures),
    }
    if config.mode == "async":
        entries["end_time"] = float(trace.info.get("end_time", 0.0))
        entries["messages"] = " ".join(f"{k}={v}" for k, v in sorted(trace.info.get("messages", {}).items()))
    return entries


# --- registry ---------------------------------------------------------------

def _open_record(config: RunConfig, kind: str, problem: PartitionedProblem):
    init_db()
    db_session = next(get_db())
    record = ExperimentRun(
        kind=kind,
        mode=config.mode,
        preset=config.preset,
        strategy=config.strategy,
        graph_seed=config.graph.seed,
        data_seed=config.instance.seed,
        sim_seed=config.sim.seed if config.mode == "async" else config.schedule.seed,
        num_nodes=problem.num_blocks,
        status=RunStatus.RUNNING,
    )
    db_session.add(record)
    db_session.commit()
    return db_session, record


# --- operations -------------------------------------------------------------

def run_experiment(config: RunConfig, registry: bool = True, show_progress: bool = False) -> MetricsReport:
    """Builds the instance, runs the configured mode and writes trace, components and summary."""
    problem = build_problem(config)
    tracked = check_tracked(config, problem)
    strategy = WeightStrategy.parse(config.strategy)
    x0 = build_start(config, problem)
    exporter = RunExporter(config.output_dir())

    db_session, record = _open_record(config, "run", problem) if registry else (None, None)
    try:
        trace = execute(config, problem, x0, strategy, exporter.output_dir, show_progress)
        report = compute_metrics(problem, trace, strategy, tracked)

        save_config(config, exporter.output_dir / "config.yaml")
        save_instance(problem, exporter.output_dir / "instance.json")
        exporter.write_trace(trace, report.gaps)
        exporter.write_components(tracked, report.components)
        report.trace_sha256 = file_sha256(exporter.trace_path)
        entries = _summary_entries(config, problem, report)
        entries["trace_sha256"] = report.trace_sha256
        exporter.write_summary(entries)
        report.output_dir = exporter.output_dir

        if report.violations:
            console.log(f"[yellow]{len(report.violations)} steps violate the descent inequality[/yellow]")
        if record is not None:
            record.iterations = len(trace)
            record.final_value = report.final_value
            record.residual = report.residual
            record.violations = len(report.violations)
            record.output_dir = str(exporter.output_dir)
            record.trace_sha256 = report.trace_sha256
            record.status = RunStatus.COMPLETED
            db_session.commit()
            report.run_id = record.id
        return report
    except Exception as e:
        if record is not None:
            record.status = RunStatus.FAILED
            record.error_message = str(e)
            db_session.commit()
        raise
    finally:
        if db_session is not None:
            db_session.close()


def compare_modes(config: RunConfig, registry: bool = True) -> DeviationReport:
    """Runs the simulator, replays its awake sequence centrally and reports per-iteration deviations."""
    config = replace(config, mode="async")
    problem = build_problem(config)
    strategy = WeightStrategy.parse(config.strategy)
    x0 = build_start(config, problem)
    exporter = RunExporter(config.output_dir())

    db_session, record = _open_record(config, "compare", problem) if registry else (None, None)
    try:
        sim_trace = execute(config, problem, x0, strategy, exporter.output_dir)
        replay = replay_centralized(problem, x0, sim_trace.blocks(), strategy)
        state_dev, value_dev = compare_traces(problem, sim_trace, replay)

        exporter.write_trace(sim_trace, sim_trace.values() - sim_trace.values()[-1])
        exporter.write_rows("compare.csv", ["t", "state_deviation", "V_deviation"],
                            ([t, float(s), float(v)] for t, (s, v) in enumerate(zip(state_dev, value_dev))))
        report = DeviationReport(len(sim_trace), state_dev, value_dev, exporter.output_dir)
        exporter.write_summary({
            "mode": "compare",
            "strategy": config.strategy,
            "sim_seed": config.sim.seed,
            "iterations": report.iterations,
            "max_state_deviation": report.max_state_deviation,
            "max_V_deviation": report.max_value_deviation,
        })
        console.log(f"[green]Centralized replay deviation:[/green] {report.max_state_deviation:.3e}")
        if record is not None:
            record.iterations = report.iterations
            record.final_value = float(sim_trace.values()[-1])
            record.max_deviation = report.max_state_deviation
            record.output_dir = str(exporter.output_dir)
            record.status = RunStatus.COMPLETED
            db_session.commit()
            report.run_id = record.id
        return report
    except Exception as e:
        if record is not None:
            record.status = RunStatus.FAILED
            record.error_message = str(e)
            db_session.commit()
        raise
    finally:
        if db_session is not None:
            db_session.close()


def audit_run(run_dir: Path, slack: float = 1e-9) -> AuditOutcome:
    """Re-checks a finished run folder: descent inequality, centralized replay, and protocol consistency."""
    run_dir = Path(run_dir)
    config = config_from_dict(read_yaml(run_dir / "config.yaml"))
    problem = load_instance(run_dir / "instance.json")
    strategy = WeightStrategy.parse(config.strategy)
    x0 = build_start(config, problem)
    saved = read_trace_csv(run_dir / "trace.csv")
    outcome = AuditOutcome()

    violations = descent_monitor(saved, problem, slack)
    expected_clean = not dominance_report(problem, x0, strategy)
    outcome.checks["descent"] = (
        not (violations and expected_clean),
        f"{len(violations)} violations" + ("" if expected_clean else " (weights do not dominate L_i, informational)"),
    )

    replay = replay_centralized(problem, x0, saved.blocks(), strategy)
    value_dev = float(np.max(np.abs(replay.values() - saved.values()))) if len(saved) else 0.0
    outcome.checks["replay_values"] = (value_dev <= slack, f"max |V_saved - V_replay| = {value_dev:.3e}")

    components = run_dir / "components.csv"
    if components.exists():
        blocks, saved_hist = read_components_csv(components)
        replay_hist = replay.component_history(problem.layout, blocks)
        comp_dev = float(np.max(np.abs(replay_hist - saved_hist))) if saved_hist.size else 0.0
        outcome.checks["replay_components"] = (comp_dev == 0.0, f"max component deviation = {comp_dev:.3e}")

    if saved.mode == "async":
        try:
            rerun = run_simulation(problem, x0, config.sim.seed, strategy,
                                   StopCriteria(max_iters=len(saved), step_tol=0.0),
                                   rate=config.sim.rate, audit=True)
            same = rerun.blocks() == saved.blocks()
            outcome.checks["consistency"] = (same, "audited after every awake" + ("" if same else "; awake sequence differs"))
        except AuditError as e:
            outcome.checks["consistency"] = (False, str(e))
    return outcome


def _run_seed(config_dict: dict, seed: int, registry: bool) -> MetricsReport:
    config = config_from_dict(config_dict)
    out = config.output.dir
    config = replace(
        config,
        sim=replace(config.sim, seed=seed),
        schedule=replace(config.schedule, seed=seed),
        output=replace(config.output, dir=str(Path(out) / f"seed{seed}") if out else None),
    )
    return run_experiment(config, registry=registry)


def run_many(config: RunConfig, seeds: Sequence[int], workers: int = 1, registry: bool = True) -> List[MetricsReport]:
    """Independent seeds of one configuration, each in its own process and output folder."""
    if workers <= 1:
        return [_run_seed(config.to_dict(), s, registry) for s in seeds]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_run_seed, config.to_dict(), s, registry) for s in seeds]
        return [f.result() for f in futures]
