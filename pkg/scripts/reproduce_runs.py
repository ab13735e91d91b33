import argparse
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

from rich.console import Console

# Add project root to path
sys.path.append(str(Path(__file__).resolve().parent.parent))

from partdescent.config import config_from_dict, read_yaml
from partdescent.database import ExperimentRun, RunStatus, get_db, init_db
from partdescent.errors import PartDescentError
from partdescent.exporter import file_sha256
from partdescent.service import run_experiment

console = Console()


def reproduce(run_id=None, scratch=None):
    """Re-executes registered runs from their config.yaml and compares trace.csv hashes."""
    init_db()
    session = next(get_db())

    query = session.query(ExperimentRun).filter(
        ExperimentRun.status == RunStatus.COMPLETED, ExperimentRun.kind == "run"
    )
    if run_id is not None:
        query = query.filter(ExperimentRun.id == run_id)
    runs = query.order_by(ExperimentRun.id.asc()).all()

    if not runs:
        console.print("[yellow]No completed runs found for the given filter.[/yellow]")
        return 0

    scratch = Path(scratch or tempfile.mkdtemp(prefix="partdescent-reproduce-"))
    console.print(f"[bold]Reproducing {len(runs)} runs into {scratch}[/bold]")
    failures = 0
    for run in runs:
        config_path = Path(run.output_dir) / "config.yaml"
        if not config_path.exists():
            console.print(f"[red]Run {run.id}: {config_path} not found. Skipping.[/red]")
            failures += 1
            continue
        try:
            config = config_from_dict(read_yaml(config_path))
            target = scratch / f"run{run.id}"
            config = replace(config, output=replace(config.output, dir=str(target)))
            report = run_experiment(config, registry=False)
        except PartDescentError as e:
            console.print(f"[bold red]Run {run.id} failed:[/bold red] {e}")
            failures += 1
            continue

        digest = file_sha256(report.output_dir / "trace.csv")
        if digest == run.trace_sha256:
            console.print(f"[green]Run {run.id}: trace.csv reproduced bit-identically[/green]")
        else:
            console.print(f"[red]Run {run.id}: trace.csv differs ({digest[:12]} vs {str(run.trace_sha256)[:12]})[/red]")
            failures += 1

    console.print("[bold green]Reproduction complete![/bold green]" if not failures else f"{failures} runs did not reproduce.")
    return failures


def parse_args():
    parser = argparse.ArgumentParser(description="Re-execute registered runs and check bit-identical traces.")
    parser.add_argument("--id", type=int, help="Reproduce only the run with this database ID.")
    parser.add_argument("--scratch", type=str, help="Folder for the re-executed runs (default: a temp folder).")
    return parser.parse_args()


if __name__ == "__main__":
    args = parse_args()
    sys.exit(1 if reproduce(run_id=args.id, scratch=args.scratch) else 0)
