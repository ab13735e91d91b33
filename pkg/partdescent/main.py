import argparse
import sys
from pathlib import Path

from rich.console import Console
from rich.panel import Panel
from rich.table import Table

from partdescent.config import OUTPUT_DIRECTORY, load_config
from partdescent.errors import ConfigError, PartDescentError
from partdescent.partition import write_edge_list
from partdescent.problem import save_instance
from partdescent.service import audit_run, build_problem, compare_modes, run_experiment, run_many

console = Console()


class CliParser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit code 1)."""

    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def add_config_arguments(parser: argparse.ArgumentParser):
    parser.add_argument("--preset", type=str, help="Load a named preset (paper, path5, trivial).")
    parser.add_argument("--config", type=Path, help="YAML run configuration, applied on top of the preset.")
    parser.add_argument("--mode", choices=["centralized", "async"], help="Execution mode.")
    parser.add_argument("--strategy", type=str,
                        help="Weight strategy: lipschitz, scaled_identity:alpha=A or second_order[:eps=E].")
    parser.add_argument("--nodes", type=int, help="Number of nodes for generated graphs.")
    parser.add_argument("--edge-prob", type=float, help="Erdos-Renyi edge probability.")
    parser.add_argument("--graph-seed", type=int, help="Seed of the communication graph.")
    parser.add_argument("--data-seed", type=int, help="Seed of the QP instance data.")
    parser.add_argument("--seed", type=int, help="Simulation seed (async) or block schedule seed (centralized).")
    parser.add_argument("--max-iters", type=int, help="Iteration (awake) budget.")
    parser.add_argument("--step-tol", type=float, help="Stop once N consecutive steps are shorter than this.")
    parser.add_argument("--start", choices=["zeros", "uniform"], help="Initial point.")
    parser.add_argument("--replay", type=str, help="trace.csv whose block sequence a centralized run replays.")
    parser.add_argument("--track-blocks", type=int, nargs="+", help="Blocks written to components.csv.")
    parser.add_argument("--event-log", action="store_true", help="Write events.log with every simulator event.")
    parser.add_argument("--audit", action="store_true", help="Run the consistency audit after every awake.")
    parser.add_argument("--out", type=str, help="Output folder.")


def overrides_from_args(args) -> dict:
    seed = getattr(args, "seed", None)
    overrides = {
        "mode": getattr(args, "mode", None),
        "strategy": args.strategy,
        "graph.nodes": args.nodes,
        "graph.p": args.edge_prob,
        "graph.seed": args.graph_seed,
        "instance.seed": args.data_seed,
        "sim.seed": seed,
        "schedule.seed": seed,
        "stop.max_iters": args.max_iters,
        "stop.step_tol": args.step_tol,
        "start.kind": args.start,
        "schedule.replay_trace": args.replay,
        "output.track_blocks": args.track_blocks,
        "output.dir": args.out,
    }
    if args.event_log:
        overrides["sim.event_log"] = True
    if args.audit:
        overrides["sim.audit"] = True
    return overrides


def load_from_args(args):
    return load_config(args.config, args.preset, overrides_from_args(args))


def print_metrics(report):
    table = Table(title="Run summary")
    table.add_column("Metric", style="cyan")
    table.add_column("Value", style="magenta")
    trace = report.trace
    table.add_row("Iterations", f"{report.iterations} ({trace.stop_reason})")
    table.add_row("V(x0)", f"{report.values[0]:.10g}")
    table.add_row("V final", f"{report.final_value:.10g}")
    table.add_row("Stationarity residual", f"{report.residual:.3e}")
    table.add_row("Descent violations", str(len(report.violations)))
    table.add_row("Dominance failures", str(len(report.dominance_failures)))
    for col, b in enumerate(report.tracked_blocks):
        table.add_row(f"x_{b} final", f"{report.components[-1, col]:.10g}")
    if report.output_dir:
        table.add_row("Output", str(report.output_dir))
    console.print(table)


def cmd_generate(args):
    config = load_from_args(args)
    problem = build_problem(config)
    out = Path(args.out) if args.out else OUTPUT_DIRECTORY / f"instance-{config.instance.seed}"
    out.mkdir(parents=True, exist_ok=True)
    save_instance(problem, out / "instance.json")
    write_edge_list(problem.graph, out / "graph.edges")
    console.print(Panel(f"[bold green]Instance with {problem.num_blocks} blocks written to[/bold green] {out}"))


def cmd_run(args):
    config = load_from_args(args)
    console.print(Panel.fit(f"[bold yellow]partdescent[/bold yellow] {config.mode} run, strategy {config.strategy}",
                            border_style="yellow"))
    registry = not args.no_registry
    if args.seeds:
        reports = run_many(config, args.seeds, args.workers, registry=registry)
        table = Table(title=f"{len(reports)} seeds")
        table.add_column("Seed", style="cyan")
        table.add_column("Iterations")
        table.add_column("V final", style="magenta")
        table.add_column("Residual")
        table.add_column("Violations")
        for seed, report in zip(args.seeds, reports):
            table.add_row(str(seed), str(report.iterations), f"{report.final_value:.10g}",
                          f"{report.residual:.3e}", str(len(report.violations)))
        console.print(table)
        return
    print_metrics(run_experiment(config, registry=registry, show_progress=True))


def cmd_compare(args):
    config = load_from_args(args)
    report = compare_modes(config, registry=not args.no_registry)
    table = Table(title="Asynchronous vs centralized replay")
    table.add_column("Metric", style="cyan")
    table.add_column("Value", style="magenta")
    table.add_row("Iterations", str(report.iterations))
    table.add_row("Max state deviation", f"{report.max_state_deviation:.3e}")
    table.add_row("Max V deviation", f"{report.max_value_deviation:.3e}")
    table.add_row("Output", str(report.output_dir))
    console.print(table)


def cmd_audit(args):
    outcome = audit_run(args.run_dir, slack=args.slack)
    table = Table(title=f"Audit of {args.run_dir}")
    table.add_column("Check", style="cyan")
    table.add_column("Result")
    table.add_column("Detail", style="dim")
    for name, (ok, detail) in outcome.checks.items():
        table.add_row(name, "[green]ok[/green]" if ok else "[red]FAILED[/red]", detail)
    console.print(table)
    if not outcome.passed:
        console.print("[bold red]Audit failed.[/bold red]")
        return 3


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(prog="partdescent",
                       description="Randomized partitioned coordinate descent and its asynchronous simulator.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    gen = sub.add_parser("generate", help="Write an instance file and its edge list.")
    add_config_arguments(gen)
    gen.set_defaults(func=cmd_generate)

    run = sub.add_parser("run", help="Run one experiment and write trace, components and summary.")
    add_config_arguments(run)
    run.add_argument("--seeds", type=int, nargs="+", help="Run these seeds independently.")
    run.add_argument("--workers", type=int, default=1, help="Processes used with --seeds.")
    run.add_argument("--no-registry", action="store_true", help="Do not record the run in the database.")
    run.set_defaults(func=cmd_run)

    cmp = sub.add_parser("compare", help="Compare the simulator against a centralized replay.")
    add_config_arguments(cmp)
    cmp.add_argument("--no-registry", action="store_true", help="Do not record the run in the database.")
    cmp.set_defaults(func=cmd_compare)

    audit = sub.add_parser("audit", help="Re-check a finished run folder.")
    audit.add_argument("run_dir", type=Path)
    audit.add_argument("--slack", type=float, default=1e-9, help="Absolute slack of the descent check.")
    audit.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args) or 0
    except PartDescentError as e:
        console.print(f"[bold red]{type(e).__name__}:[/bold red] {e}")
        return e.exit_code
    except KeyboardInterrupt:
        console.print("Stopping...")
        return 130


if __name__ == "__main__":
    sys.exit(main())
