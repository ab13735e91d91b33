import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from rich.console import Console
from rich.progress import Progress

from partdescent.errors import ConfigError, NumericalError
from partdescent.local_model import INNER_MAX_ITERS, INNER_TOL, WeightStrategy, descent_direction
from partdescent.problem import PartitionedProblem, aggregate_value, block_lipschitz, local_value_change

console = Console()

DESCENT_SLACK = 1e-9
DEFAULT_STEP_TOL = 1e-12
DEFAULT_SWEEPS = 1000


@dataclass(frozen=True)
class BlockSchedule:
    """Block selection: i.i.d. draws with probabilities p_i, or a fixed replay list."""

    mode: str = "uniform"
    seed: Optional[int] = None
    probabilities: Optional[Tuple[float, ...]] = None
    sequence: Optional[Tuple[int, ...]] = None

    @classmethod
    def uniform(cls, seed: int, probabilities: Optional[Sequence[float]] = None):
        probs = None if probabilities is None else tuple(float(p) for p in probabilities)
        return cls("uniform", seed=int(seed), probabilities=probs)

    @classmethod
    def replay(cls, blocks: Sequence[int]):
        return cls("replay", sequence=tuple(int(b) for b in blocks))

    def blocks(self, num_blocks: int) -> Iterator[int]:
        if self.mode == "replay":
            bad = [b for b in self.sequence if not 0 <= b < num_blocks]
            if bad:
                raise ConfigError(f"Replay list has blocks outside 0..{num_blocks - 1}: {bad[:5]}")
            yield from self.sequence
            return
        if self.mode != "uniform":
            raise ConfigError(f"Unknown schedule mode {self.mode!r}")

        rng = np.random.default_rng(self.seed)
        if self.probabilities is None:
            while True:
                yield int(rng.integers(num_blocks))
        probs = np.asarray(self.probabilities, dtype=float)
        if probs.shape != (num_blocks,) or np.any(probs <= 0) or not math.isclose(probs.sum(), 1.0, rel_tol=1e-9):
            raise ConfigError("Block probabilities must be positive, one per block, and sum to 1")
        while True:
            yield int(rng.choice(num_blocks, p=probs))


@dataclass(frozen=True)
class StopCriteria:
    max_iters: Optional[int] = None
    step_tol: float = DEFAULT_STEP_TOL
    window: Optional[int] = None

    def resolve(self, num_blocks: int) -> "StopCriteria":
        return StopCriteria(
            max_iters=DEFAULT_SWEEPS * num_blocks if self.max_iters is None else int(self.max_iters),
            step_tol=float(self.step_tol),
            window=num_blocks if self.window is None else int(self.window),
        )


@dataclass
class StepRecord:
    t: int
    block: int
    step_norm: float
    value: float
    decrease: float
    block_value: np.ndarray
    sim_time: Optional[float] = None


@dataclass
class RunTrace:
    """Per-iteration records of one run; V(x(t)) for t = 0..T is `values()`."""

    mode: str
    x0: np.ndarray
    initial_value: float
    records: List[StepRecord] = field(default_factory=list)
    x_final: Optional[np.ndarray] = None
    stop_reason: str = ""
    info: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.records)

    def values(self) -> np.ndarray:
        return np.array([self.initial_value] + [r.value for r in self.records])

    def blocks(self) -> List[int]:
        return [r.block for r in self.records]

    def step_norms(self) -> np.ndarray:
        return np.array([r.step_norm for r in self.records])

    def sim_times(self) -> List[Optional[float]]:
        return [r.sim_time for r in self.records]

    def states(self, layout) -> Iterator[np.ndarray]:
        """x(0), x(1), ... reconstructed from the per-step block values."""
        x = np.array(self.x0, dtype=float)
        yield x.copy()
        for r in self.records:
            x[layout.block_slice(r.block)] = r.block_value
            yield x.copy()

    def component_history(self, layout, blocks: Sequence[int]) -> np.ndarray:
        """Rows t = 0..T, one column per tracked block (first entry of the block)."""
        x = np.array(self.x0, dtype=float)
        cols = [layout.offsets[b] for b in blocks]
        rows = [x[cols].copy()]
        for r in self.records:
            x[layout.block_slice(r.block)] = r.block_value
            rows.append(x[cols].copy())
        return np.array(rows)


@dataclass(frozen=True)
class DescentViolation:
    t: int
    block: int
    actual_change: float
    guaranteed_change: float

    @property
    def excess(self) -> float:
        return self.actual_change - self.guaranteed_change


def cd_step(
    problem: PartitionedProblem,
    x: np.ndarray,
    i: int,
    strategy: WeightStrategy,
    t: int = 1,
    value: Optional[float] = None,
    tol: float = INNER_TOL,
    max_iters: int = INNER_MAX_ITERS,
) -> Tuple[np.ndarray, StepRecord]:
    """x(t+1) = x(t) + U_i d_i; every other block is copied unchanged."""
    x = problem.layout.check_vector(x)
    d, decrease = descent_direction(problem, x, i, strategy, tol, max_iters)
    sl = problem.layout.block_slice(i)
    new_block = x[sl] + d
    if value is None:
        value = aggregate_value(problem, x)
    new_value = value + local_value_change(problem, x, i, new_block)
    if not math.isfinite(new_value):
        raise NumericalError(f"Objective became non-finite after updating block {i}", iteration=t)

    x_plus = x.copy()
    x_plus[sl] = new_block
    record = StepRecord(t, i, float(np.linalg.norm(d)), new_value, decrease, new_block.copy())
    return x_plus, record


class StepWindow:
    """Stops once `window` consecutive step norms all fall below `tol`."""

    def __init__(self, window: int, tol: float):
        self.norms = deque(maxlen=max(1, window))
        self.tol = tol

    def push(self, norm: float) -> bool:
        self.norms.append(norm)
        return len(self.norms) == self.norms.maxlen and max(self.norms) < self.tol


def run_cd(
    problem: PartitionedProblem,
    x0: np.ndarray,
    schedule: BlockSchedule,
    strategy: WeightStrategy,
    stop: StopCriteria = StopCriteria(),
    show_progress: bool = False,
    tol: float = INNER_TOL,
    max_inner_iters: int = INNER_MAX_ITERS,
) -> RunTrace:
    """Generalized coordinate descent: one randomly chosen block per iteration."""
    stop = stop.resolve(problem.num_blocks)
    x = np.array(problem.layout.check_vector(x0), dtype=float)
    value = aggregate_value(problem, x)
    if not math.isfinite(value):
        raise NumericalError("Initial point is infeasible (V(x0) is not finite)", iteration=0)

    trace = RunTrace(mode="centralized", x0=x.copy(), initial_value=value)
    window = StepWindow(stop.window, stop.step_tol)
    trace.stop_reason = "max_iters"
    limit = stop.max_iters
    if schedule.mode == "replay":
        limit = min(limit, len(schedule.sequence))
        trace.stop_reason = "replay_exhausted" if limit == len(schedule.sequence) else "max_iters"

    blocks = schedule.blocks(problem.num_blocks)
    with Progress(console=console, transient=True, disable=not show_progress) as progress:
        task = progress.add_task("Coordinate descent", total=limit)
        for t in range(1, limit + 1):
            i = next(blocks)
            x, record = cd_step(problem, x, i, strategy, t=t, value=value, tol=tol, max_iters=max_inner_iters)
            value = record.value
            trace.records.append(record)
            if t % 1000 == 0:
                progress.update(task, completed=t)
            if window.push(record.step_norm):
                trace.stop_reason = "step_tol"
                break

    trace.x_final = x
    console.log(
        f"[dim]Coordinate descent stopped ({trace.stop_reason}) after {len(trace)} iterations, "
        f"V = {value:.10g}[/dim]"
    )
    return trace


def descent_monitor(trace: RunTrace, problem: PartitionedProblem, slack: float = DESCENT_SLACK) -> List[DescentViolation]:
    """Steps where V(x(t+1)) > V(x(t)) - (L_i/2)||d_i||^2 + slack."""
    lipschitz = [block_lipschitz(problem, i) for i in range(problem.num_blocks)]
    values = trace.values()
    violations = []
    for k, r in enumerate(trace.records):
        actual = values[k + 1] - values[k]
        guaranteed = -0.5 * lipschitz[r.block] * r.step_norm ** 2
        if actual > guaranteed + slack:
            violations.append(DescentViolation(r.t, r.block, float(actual), float(guaranteed)))
    return violations


def squared_step_sum(trace: RunTrace) -> float:
    return float(np.sum(trace.step_norms() ** 2))
