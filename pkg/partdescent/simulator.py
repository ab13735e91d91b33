"""Discrete-event simulation of the idle/awake partitioned coordinate descent protocol.

Every node owns one block, an exponential timer, and caches of its neighbors'
states and of the partial gradients grad_{x_i} f_j sent to it. Deliveries have
zero delay: the whole message cascade of an awake event is drained before the
next timer fires, which is what keeps the caches consistent between awakes.
"""
import enum
import heapq
import itertools
import math
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from rich.console import Console

from partdescent.descent import BlockSchedule, RunTrace, StepRecord, StepWindow, StopCriteria, run_cd
from partdescent.errors import AuditError, NumericalError, ProtocolError
from partdescent.local_model import INNER_MAX_ITERS, INNER_TOL, WeightStrategy, solve_block
from partdescent.problem import (
    PartitionedProblem,
    aggregate_value,
    block_lipschitz,
    local_value_change,
    sum_contributions,
)

console = Console()

DEFAULT_RATE = 1.0


class EventKind(str, enum.Enum):
    TIMER_FIRE = "timer_fire"
    DELIVER = "deliver"


class MessageKind(str, enum.Enum):
    STATE_BROADCAST = "state_broadcast"
    GRADIENT_ONLY = "gradient_only"


@dataclass(frozen=True)
class Message:
    kind: MessageKind
    sender: int
    receiver: int
    gradient: np.ndarray  # grad_{x_receiver} f_sender
    state: Optional[np.ndarray] = None  # x_sender, broadcasts only
    hessian: Optional[np.ndarray] = None


@dataclass(order=True)
class SimEvent:
    time: float
    seq: int
    kind: EventKind = field(compare=False)
    node: int = field(compare=False)
    message: Optional[Message] = field(default=None, compare=False)


@dataclass
class NodeState:
    node: int
    support: Tuple[int, ...]
    neighbor_states: Dict[int, np.ndarray]
    gradients: Dict[int, np.ndarray]
    rng: np.random.Generator
    hessians: Dict[int, np.ndarray] = field(default_factory=dict)
    deadline: float = 0.0
    awakes: int = 0

    @property
    def x(self) -> np.ndarray:
        return self.neighbor_states[self.node]

    def local_vector(self) -> np.ndarray:
        return np.concatenate([self.neighbor_states[j] for j in self.support])


@dataclass
class AuditReport:
    quiescent: bool = True
    state_mismatches: List[Tuple[int, int]] = field(default_factory=list)
    gradient_mismatches: List[Tuple[int, int]] = field(default_factory=list)
    hessian_mismatches: List[Tuple[int, int]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.quiescent and not (self.state_mismatches or self.gradient_mismatches or self.hessian_mismatches)

    def describe(self) -> str:
        if self.passed:
            return "consistent"
        parts = []
        if not self.quiescent:
            parts.append("messages still pending")
        if self.state_mismatches:
            parts.append(f"stale states (holder, owner): {self.state_mismatches[:5]}")
        if self.gradient_mismatches:
            parts.append(f"stale gradients (holder, term): {self.gradient_mismatches[:5]}")
        if self.hessian_mismatches:
            parts.append(f"stale Hessians (holder, term): {self.hessian_mismatches[:5]}")
        return "; ".join(parts)


def node_streams(seed: int, num_nodes: int) -> List[np.random.Generator]:
    """One independent generator per node; stream i does not depend on num_nodes."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(num_nodes)]


def schedule_next_fire(rng: np.random.Generator, node: int, rate: float, now: float, seq: int = 0) -> SimEvent:
    if rate <= 0:
        raise ValueError(f"Timer rate must be positive, got {rate}")
    return SimEvent(now + rng.exponential(1.0 / rate), seq, EventKind.TIMER_FIRE, node)


class Simulator:
    def __init__(
        self,
        problem: PartitionedProblem,
        x0: np.ndarray,
        strategy: WeightStrategy,
        seed: int,
        rate: float = DEFAULT_RATE,
        event_log: Optional[Console] = None,
        tol: float = INNER_TOL,
        max_inner_iters: int = INNER_MAX_ITERS,
    ):
        self.problem = problem
        self.strategy = strategy
        self.rate = float(rate)
        self.event_log = event_log
        self.tol = tol
        self.max_inner_iters = max_inner_iters
        self.now = 0.0
        self.timers: List[SimEvent] = []
        self.pending: deque = deque()
        self._seq = itertools.count()
        self.message_totals = Counter()
        self.last_cascade = Counter()
        self.lipschitz = [block_lipschitz(problem, i) for i in range(problem.num_blocks)]

        layout = problem.layout
        self.x = np.array(layout.check_vector(x0), dtype=float)
        self.value = aggregate_value(problem, self.x)
        if not math.isfinite(self.value):
            raise NumericalError("Initial point is infeasible (V(x0) is not finite)", iteration=0)

        streams = node_streams(seed, problem.num_blocks)
        self.nodes = []
        for i in range(problem.num_blocks):
            support = problem.graph.neighbors(i)
            self.nodes.append(NodeState(
                node=i,
                support=support,
                neighbor_states={j: self.x[layout.block_slice(j)].copy() for j in support},
                gradients={},
                rng=streams[i],
            ))
        self._warm_up()
        for node in self.nodes:
            self._arm_timer(node)

    # --- protocol ---------------------------------------------------------

    def _warm_up(self):
        """Before time 0 every node sends its term's partial gradients to its neighbors."""
        for node in self.nodes:
            for msg in self._term_messages(node, MessageKind.GRADIENT_ONLY):
                target = self.nodes[msg.receiver]
                target.gradients[msg.sender] = msg.gradient
                if msg.hessian is not None:
                    target.hessians[msg.sender] = msg.hessian
                self.message_totals["warm_up"] += 1

    def _term_messages(self, node: NodeState, kind: MessageKind) -> List[Message]:
        i = node.node
        term = self.problem.smooth_terms[i]
        x_local = node.local_vector()
        grads = term.split_gradient(x_local)
        messages = []
        for j in node.support:
            hess = term.hessian_block(x_local, j) if self.strategy.needs_hessian else None
            state = node.x.copy() if kind is MessageKind.STATE_BROADCAST else None
            messages.append(Message(kind, i, j, grads[j], state, hess))
        return messages

    def _arm_timer(self, node: NodeState):
        event = schedule_next_fire(node.rng, node.node, self.rate, self.now, next(self._seq))
        node.deadline = event.time
        heapq.heappush(self.timers, event)

    def _post(self, messages: List[Message]):
        for msg in messages:
            self.pending.append(SimEvent(self.now, next(self._seq), EventKind.DELIVER, msg.receiver, msg))
            self.message_totals[msg.kind.value] += 1
            self.last_cascade[msg.kind.value] += 1

    def _log(self, event: SimEvent, detail: str):
        if self.event_log is not None:
            self.event_log.print(f"{event.time:.9f} {event.kind.value} {detail}", highlight=False, markup=False)

    def awake_step(self, i: int) -> Tuple[List[Message], StepRecord]:
        """Node i minimizes its local model from cached data, updates x_i and broadcasts."""
        node = self.nodes[i]
        problem = self.problem
        n_i = problem.layout.block_dims[i]
        gradient = sum_contributions([node.gradients[j] for j in node.support], n_i)
        hessian = None
        if self.strategy.needs_hessian:
            hessian = sum_contributions([node.hessians[j] for j in node.support], (n_i, n_i))
        weight = self.strategy.weight(self.lipschitz[i], n_i, hessian)

        anchor = node.x.copy()
        d, decrease = solve_block(i, anchor, gradient, weight, problem.regularizers[i], self.tol, self.max_inner_iters)
        new_block = anchor + d

        delta = local_value_change(problem, self.x, i, new_block)
        node.neighbor_states[i] = new_block
        self.x[problem.layout.block_slice(i)] = new_block
        self.value = self.value + delta
        node.awakes += 1

        messages = self._term_messages(node, MessageKind.STATE_BROADCAST)
        self._arm_timer(node)
        record = StepRecord(0, i, float(np.linalg.norm(d)), self.value, decrease, new_block.copy(), sim_time=self.now)
        return messages, record

    def idle_handle(self, i: int, msg: Message) -> List[Message]:
        node = self.nodes[i]
        if msg.receiver != i:
            raise ProtocolError(f"Message for node {msg.receiver} handed to node {i}")
        if msg.sender not in node.support:
            raise ProtocolError(f"Node {i} received a message from non-neighbor {msg.sender}")

        node.gradients[msg.sender] = msg.gradient
        if msg.hessian is not None:
            node.hessians[msg.sender] = msg.hessian
        if msg.kind is MessageKind.GRADIENT_ONLY:
            return []
        node.neighbor_states[msg.sender] = msg.state
        return self._term_messages(node, MessageKind.GRADIENT_ONLY)

    def drain(self):
        while self.pending:
            event = self.pending.popleft()
            msg = event.message
            self._log(event, f"{msg.kind.value} {msg.sender}->{msg.receiver} |g|={np.linalg.norm(msg.gradient):.6g}")
            self._post(self.idle_handle(event.node, msg))

    def wake(self, i: int, event: Optional[SimEvent] = None) -> StepRecord:
        """Awake phase of node i followed by its full delivery cascade."""
        self.last_cascade = Counter()
        messages, record = self.awake_step(i)
        if event is not None:
            self._log(event, f"node {i} |d|={record.step_norm:.6g}")
        self._post(messages)
        self.drain()
        if not math.isfinite(self.value):
            raise NumericalError(f"Objective became non-finite after node {i} woke up")
        return record

    def next_fire_time(self) -> float:
        """Time of the earliest live timer."""
        # a forced wake re-arms the timer, leaving the old deadline stale
        while self.timers[0].time != self.nodes[self.timers[0].node].deadline:
            heapq.heappop(self.timers)
        return self.timers[0].time

    def next_awake(self) -> StepRecord:
        """Fires the earliest live timer."""
        self.next_fire_time()
        event = heapq.heappop(self.timers)
        self.now = event.time
        return self.wake(event.node, event)

    def global_state(self) -> np.ndarray:
        """x assembled from the blocks each node holds for itself."""
        return np.concatenate([node.x for node in self.nodes])

    # --- audit ------------------------------------------------------------

    def consistency_audit(self) -> AuditReport:
        problem = self.problem
        report = AuditReport(quiescent=not self.pending)
        x = self.global_state()
        for i, node in enumerate(self.nodes):
            for j in node.support:
                if not np.array_equal(self.nodes[j].neighbor_states[i], node.x):
                    report.state_mismatches.append((j, i))
                term = problem.smooth_terms[j]
                x_local = problem.gather(x, j)
                if not np.array_equal(node.gradients.get(j), term.partial_gradient(x_local, i)):
                    report.gradient_mismatches.append((i, j))
                if self.strategy.needs_hessian and not np.array_equal(node.hessians.get(j), term.hessian_block(x_local, i)):
                    report.hessian_mismatches.append((i, j))
        return report


def run_simulation(
    problem: PartitionedProblem,
    x0: np.ndarray,
    seed: int,
    strategy: WeightStrategy,
    stop: StopCriteria = StopCriteria(),
    rate: float = DEFAULT_RATE,
    audit: bool = False,
    event_log: Optional[Console] = None,
    max_time: Optional[float] = None,
) -> RunTrace:
    """Runs awake events until the stop criteria hold; t counts awake events."""
    stop = stop.resolve(problem.num_blocks)
    sim = Simulator(problem, x0, strategy, seed, rate=rate, event_log=event_log)
    if audit:
        _check(sim, 0)

    trace = RunTrace(mode="async", x0=np.array(x0, dtype=float), initial_value=sim.value, stop_reason="max_iters")
    window = StepWindow(stop.window, stop.step_tol)
    for t in range(1, stop.max_iters + 1):
        if max_time is not None and sim.next_fire_time() > max_time:
            trace.stop_reason = "max_time"
            break
        record = sim.next_awake()
        record.t = t
        trace.records.append(record)
        if audit:
            _check(sim, t)
        if window.push(record.step_norm):
            trace.stop_reason = "step_tol"
            break

    trace.x_final = sim.global_state()
    trace.info.update({
        "sim_seed": int(seed),
        "rate": rate,
        "end_time": sim.now,
        "messages": dict(sim.message_totals),
        "awakes_per_node": [node.awakes for node in sim.nodes],
        "audited": audit,
    })
    console.log(
        f"[dim]Simulation stopped ({trace.stop_reason}) after {len(trace)} awakes at time {sim.now:.4g}, "
        f"V = {sim.value:.10g}, {sum(sim.message_totals.values())} messages[/dim]"
    )
    return trace


def _check(sim: Simulator, t: int):
    report = sim.consistency_audit()
    if not report.passed:
        raise AuditError(f"Consistency audit failed after awake {t}: {report.describe()}", report)


def compare_traces(problem: PartitionedProblem, first: RunTrace, second: RunTrace) -> Tuple[np.ndarray, np.ndarray]:
    """Per-iteration max-norm state deviation and absolute V deviation, t = 0..T."""
    if len(first) != len(second):
        raise AuditError(f"Traces differ in length: {len(first)} vs {len(second)}")
    layout = problem.layout
    state_dev = []
    for xa, xb in zip(first.states(layout), second.states(layout)):
        state_dev.append(float(np.max(np.abs(xa - xb))) if xa.size else 0.0)
    value_dev = np.abs(first.values() - second.values())
    return np.array(state_dev), value_dev


def replay_centralized(problem: PartitionedProblem, x0: np.ndarray, blocks, strategy: WeightStrategy) -> RunTrace:
    blocks = list(blocks)
    return run_cd(problem, x0, BlockSchedule.replay(blocks), strategy, StopCriteria(max_iters=len(blocks), step_tol=0.0))


def trace_equivalence(problem: PartitionedProblem, x0: np.ndarray, sim_trace: RunTrace, strategy: WeightStrategy) -> float:
    """max_t ||x_sim(t) - x_cd(t)||_inf against a centralized replay of the awake sequence."""
    replay = replay_centralized(problem, x0, sim_trace.blocks(), strategy)
    state_dev, _ = compare_traces(problem, sim_trace, replay)
    return float(state_dev.max()) if state_dev.size else 0.0
