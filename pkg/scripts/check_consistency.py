import argparse
import sys
from pathlib import Path

from rich.console import Console

# Add project root to path
sys.path.append(str(Path(__file__).resolve().parent.parent))

from partdescent.database import ExperimentRun, RunStatus, get_db, init_db
from partdescent.exporter import file_sha256

console = Console()


def check_consistency(run_id=None):
    init_db()
    session = next(get_db())

    query = session.query(ExperimentRun).filter(ExperimentRun.status == RunStatus.COMPLETED)
    if run_id is not None:
        query = query.filter(ExperimentRun.id == run_id)
    runs = query.order_by(ExperimentRun.id.asc()).all()

    issues_found = 0
    console.print(f"Checking {len(runs)} completed runs...")

    for run in runs:
        folder = Path(run.output_dir) if run.output_dir else None
        if folder is None or not folder.is_dir():
            console.print(f"[red][MISSING][/red] run {run.id}: output folder {run.output_dir} not found")
            issues_found += 1
            continue

        for name in ("trace.csv", "summary.txt"):
            if not (folder / name).exists():
                console.print(f"[red][MISSING][/red] run {run.id}: {name} not in {folder}")
                issues_found += 1

        trace = folder / "trace.csv"
        if run.trace_sha256 and trace.exists():
            digest = file_sha256(trace)
            if digest != run.trace_sha256:
                console.print(f"[yellow][MISMATCH][/yellow] run {run.id}: trace.csv hash changed")
                console.print(f"  DB:   {run.trace_sha256}")
                console.print(f"  File: {digest}")
                issues_found += 1

    if issues_found == 0:
        console.print("[green]All run folders match the registry.[/green]")
    else:
        console.print(f"Found {issues_found} issues.")
    return issues_found


def parse_args():
    parser = argparse.ArgumentParser(description="Check registered runs against their output folders.")
    parser.add_argument("--id", type=int, help="Check only the run with this database ID.")
    return parser.parse_args()


if __name__ == "__main__":
    args = parse_args()
    sys.exit(1 if check_consistency(run_id=args.id) else 0)
