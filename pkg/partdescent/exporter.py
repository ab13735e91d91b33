import csv
import hashlib
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np
from rich.console import Console

from partdescent.descent import RunTrace, StepRecord
from partdescent.errors import ConfigError

console = Console()

TRACE_COLUMNS = ["t", "block", "step_norm", "V", "V_gap", "sim_time"]


def fmt(value) -> str:
    """17 significant digits, enough for an exact float round-trip."""
    return "" if value is None else f"{float(value):.17g}"


def file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class RunExporter:
    def __init__(self, output_dir: Path):
        self.output_dir = Path(output_dir)
        if not self.output_dir.exists():
            console.log(f"[dim]Creating output folder {self.output_dir}[/dim]")
            self.output_dir.mkdir(parents=True, exist_ok=True)

    @property
    def trace_path(self) -> Path:
        return self.output_dir / "trace.csv"

    def write_trace(self, trace: RunTrace, gaps: np.ndarray) -> Path:
        """t = 0 row holds V(x0); later rows one per iteration."""
        values = trace.values()
        with open(self.trace_path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            writer.writerow([0, "", fmt(0.0), fmt(values[0]), fmt(gaps[0]), fmt(0.0) if trace.mode == "async" else ""])
            for k, r in enumerate(trace.records, start=1):
                writer.writerow([r.t, r.block, fmt(r.step_norm), fmt(values[k]), fmt(gaps[k]), fmt(r.sim_time)])
        return self.trace_path

    def write_components(self, blocks: Sequence[int], history: np.ndarray) -> Path:
        path = self.output_dir / "components.csv"
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["t"] + [f"x_{b}" for b in blocks])
            for t, row in enumerate(history):
                writer.writerow([t] + [fmt(v) for v in row])
        return path

    def write_rows(self, name: str, header: List[str], rows) -> Path:
        path = self.output_dir / name
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([v if isinstance(v, (int, str)) else fmt(v) for v in row])
        return path

    def write_summary(self, entries: Dict[str, object]) -> Path:
        path = self.output_dir / "summary.txt"
        lines = []
        for key, value in entries.items():
            if isinstance(value, float):
                value = fmt(value)
            lines.append(f"{key}: {value}")
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        console.log(f"[green]Run summary written:[/green] {path}")
        return path


def read_trace_csv(path: Path) -> RunTrace:
    """Loads a trace.csv back; block values are not stored, only the scalar columns."""
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            rows = list(csv.DictReader(f))
    except FileNotFoundError:
        raise ConfigError(f"Trace file not found: {path}")
    if not rows or list(rows[0].keys()) != TRACE_COLUMNS:
        raise ConfigError(f"{path} is not a trace file (expected columns {TRACE_COLUMNS})")

    first = rows[0]
    mode = "async" if first["sim_time"] != "" else "centralized"
    trace = RunTrace(mode=mode, x0=np.empty(0), initial_value=float(first["V"]))
    for row in rows[1:]:
        sim_time = float(row["sim_time"]) if row["sim_time"] != "" else None
        trace.records.append(StepRecord(
            t=int(row["t"]),
            block=int(row["block"]),
            step_norm=float(row["step_norm"]),
            value=float(row["V"]),
            decrease=float("nan"),
            block_value=None,
            sim_time=sim_time,
        ))
    return trace


def read_components_csv(path: Path) -> Tuple[List[int], np.ndarray]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        rows = [[float(v) for v in row[1:]] for row in reader]
    blocks = [int(name.split("_", 1)[1]) for name in header[1:]]
    return blocks, np.array(rows)
