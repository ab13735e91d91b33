import numpy as np
import pytest
from rich.console import Console

from partdescent.descent import StopCriteria, cd_step, descent_monitor
from partdescent.errors import AuditError, ProtocolError
from partdescent.local_model import WeightStrategy
from partdescent.partition import erdos_renyi_connected, path_graph
from partdescent.problem import generate_paper_instance, stationarity_residual, zero_instance
from partdescent.simulator import (
    Message,
    MessageKind,
    Simulator,
    compare_traces,
    node_streams,
    replay_centralized,
    run_simulation,
    schedule_next_fire,
    trace_equivalence,
)

LIPSCHITZ = WeightStrategy.lipschitz()


def test_timer_streams_are_reproducible():
    a = node_streams(3, 4)[2]
    b = node_streams(3, 4)[2]
    times_a = [schedule_next_fire(a, 2, 1.0, 0.0).time for _ in range(5)]
    times_b = [schedule_next_fire(b, 2, 1.0, 0.0).time for _ in range(5)]
    assert times_a == times_b


def test_node_streams_do_not_depend_on_the_node_count():
    small = node_streams(9, 5)[3]
    large = node_streams(9, 50)[3]
    assert small.random() == large.random()


def test_nonpositive_rate_is_rejected():
    with pytest.raises(ValueError):
        schedule_next_fire(np.random.default_rng(0), 0, 0.0, 0.0)


def test_mean_gap_is_the_inverse_rate():
    rng = node_streams(1, 1)[0]
    gaps = [schedule_next_fire(rng, 0, 2.5, 10.0).time - 10.0 for _ in range(100_000)]
    assert np.mean(gaps) == pytest.approx(1 / 2.5, rel=0.02)


def test_timer_law_selects_nodes_uniformly():
    streams = node_streams(4, 10)
    timers = [schedule_next_fire(rng, i, 1.0, 0.0, seq=i) for i, rng in enumerate(streams)]
    counts = np.zeros(10)
    for k in range(100_000):
        first = min(timers)
        counts[first.node] += 1
        timers[first.node] = schedule_next_fire(streams[first.node], first.node, 1.0, first.time, seq=10 + k)
    np.testing.assert_allclose(counts / counts.sum(), 0.1, atol=0.005)


def test_simulated_awakes_are_uniform():
    problem = zero_instance(path_graph(10))
    sim = Simulator(problem, np.zeros(10), LIPSCHITZ, seed=4)
    counts = np.zeros(10)
    last_time = 0.0
    for _ in range(10_000):
        record = sim.next_awake()
        assert record.sim_time >= last_time
        last_time = record.sim_time
        counts[record.block] += 1
    np.testing.assert_allclose(counts / counts.sum(), 0.1, atol=0.02)


def test_warm_up_leaves_caches_consistent(small_problem):
    sim = Simulator(small_problem, np.zeros(10), LIPSCHITZ, seed=0)
    assert sim.consistency_audit().passed
    for node in sim.nodes:
        assert set(node.gradients) == set(node.support)


def test_single_awake_matches_one_cd_step(small_problem, interior_point):
    x0 = interior_point(small_problem)
    for i in range(small_problem.num_blocks):
        sim = Simulator(small_problem, x0, LIPSCHITZ, seed=0)
        record = sim.wake(i)
        x_cd, cd_record = cd_step(small_problem, x0, i, LIPSCHITZ)
        np.testing.assert_array_equal(sim.global_state(), x_cd)
        assert record.value == cd_record.value


def test_zero_gradient_awake_still_broadcasts():
    problem = zero_instance(path_graph(3))
    sim = Simulator(problem, np.zeros(3), LIPSCHITZ, seed=0)
    messages, record = sim.awake_step(1)
    assert record.step_norm == 0.0
    assert sorted(m.receiver for m in messages) == [0, 1, 2]
    assert all(m.kind is MessageKind.STATE_BROADCAST for m in messages)


def test_awakes_with_disjoint_neighborhoods_commute(path5_problem, interior_point):
    x0 = interior_point(path5_problem, seed=3)
    first = Simulator(path5_problem, x0, LIPSCHITZ, seed=0)
    first.wake(0)
    first.wake(4)
    second = Simulator(path5_problem, x0, LIPSCHITZ, seed=0)
    second.wake(4)
    second.wake(0)
    np.testing.assert_array_equal(first.global_state(), second.global_state())
    assert first.consistency_audit().passed and second.consistency_audit().passed


def test_gradient_only_delivery_emits_nothing(path5_problem):
    sim = Simulator(path5_problem, np.zeros(5), LIPSCHITZ, seed=0)
    msg = Message(MessageKind.GRADIENT_ONLY, 1, 2, np.array([0.5]))
    assert sim.idle_handle(2, msg) == []
    np.testing.assert_array_equal(sim.nodes[2].gradients[1], [0.5])


def test_state_broadcast_triggers_one_gradient_per_neighbor(path5_problem):
    sim = Simulator(path5_problem, np.zeros(5), LIPSCHITZ, seed=0)
    msg = Message(MessageKind.STATE_BROADCAST, 1, 2, np.array([0.0]), state=np.array([1.0]))
    emitted = sim.idle_handle(2, msg)
    assert [m.receiver for m in emitted] == [1, 2, 3]
    assert all(m.kind is MessageKind.GRADIENT_ONLY and m.sender == 2 for m in emitted)


def test_message_from_a_non_neighbor_is_a_protocol_error(path5_problem):
    sim = Simulator(path5_problem, np.zeros(5), LIPSCHITZ, seed=0)
    with pytest.raises(ProtocolError):
        sim.idle_handle(4, Message(MessageKind.GRADIENT_ONLY, 0, 4, np.array([0.0])))
    with pytest.raises(ProtocolError):
        sim.idle_handle(3, Message(MessageKind.GRADIENT_ONLY, 2, 4, np.array([0.0])))


def test_message_counts_per_awake(small_problem):
    sim = Simulator(small_problem, np.zeros(10), LIPSCHITZ, seed=6)
    graph = small_problem.graph
    for _ in range(200):
        record = sim.next_awake()
        i = record.block
        broadcasts = sim.last_cascade[MessageKind.STATE_BROADCAST.value]
        forwards = sim.last_cascade[MessageKind.GRADIENT_ONLY.value]
        assert broadcasts == graph.degree(i)
        assert forwards == sum(graph.degree(j) for j in graph.neighbors(i))


def test_audit_after_every_awake(small_problem):
    trace = run_simulation(small_problem, np.zeros(10), seed=2, strategy=LIPSCHITZ,
                           stop=StopCriteria(max_iters=1000, step_tol=0.0), audit=True)
    assert trace.info["audited"]
    assert len(trace) == 1000


def test_corrupted_cache_is_reported_with_its_pair(small_problem):
    sim = Simulator(small_problem, np.zeros(10), LIPSCHITZ, seed=0)
    holder = 3
    term = small_problem.graph.neighbors(holder)[-1]
    sim.nodes[holder].gradients[term] = sim.nodes[holder].gradients[term] + 1e-3
    report = sim.consistency_audit()
    assert not report.passed
    assert report.gradient_mismatches == [(holder, term)]

    other = Simulator(small_problem, np.zeros(10), LIPSCHITZ, seed=0)
    owner = next(j for j in small_problem.graph.neighbors(holder) if j != holder)
    other.nodes[holder].neighbor_states[owner] = np.array([1.0])
    report = other.consistency_audit()
    assert (holder, owner) in report.state_mismatches
    assert "stale states" in report.describe()


def test_corruption_aborts_an_audited_run(small_problem, monkeypatch):
    original = Simulator.drain

    def lossy_drain(self):
        # drop the last delivery of every cascade
        if self.pending:
            self.pending.pop()
        original(self)

    monkeypatch.setattr(Simulator, "drain", lossy_drain)
    with pytest.raises(AuditError) as info:
        run_simulation(small_problem, np.zeros(10), seed=0, strategy=LIPSCHITZ,
                       stop=StopCriteria(max_iters=10), audit=True)
    assert not info.value.report.passed


def test_zero_awakes_keep_x0(path5_problem, interior_point):
    x0 = interior_point(path5_problem)
    trace = run_simulation(path5_problem, x0, seed=1, strategy=LIPSCHITZ, stop=StopCriteria(max_iters=0))
    assert len(trace) == 0
    np.testing.assert_array_equal(trace.x_final, x0)
    assert trace_equivalence(path5_problem, x0, trace, LIPSCHITZ) == 0.0


def test_same_seed_gives_identical_traces(small_problem):
    stop = StopCriteria(max_iters=300)
    a = run_simulation(small_problem, np.zeros(10), seed=8, strategy=LIPSCHITZ, stop=stop)
    b = run_simulation(small_problem, np.zeros(10), seed=8, strategy=LIPSCHITZ, stop=stop)
    assert a.blocks() == b.blocks()
    assert a.sim_times() == b.sim_times()
    np.testing.assert_array_equal(a.values(), b.values())


def test_simulated_values_are_monotone(small_problem):
    trace = run_simulation(small_problem, np.zeros(10), seed=3, strategy=LIPSCHITZ,
                           stop=StopCriteria(max_iters=2000))
    assert np.all(np.diff(trace.values()) <= 1e-9)
    assert descent_monitor(trace, small_problem) == []


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_replay_of_the_awake_sequence_is_bit_identical(small_problem, seed):
    x0 = np.zeros(10)
    trace = run_simulation(small_problem, x0, seed=seed, strategy=LIPSCHITZ, stop=StopCriteria(max_iters=500))
    assert trace_equivalence(small_problem, x0, trace, LIPSCHITZ) == 0.0
    replay = replay_centralized(small_problem, x0, trace.blocks(), LIPSCHITZ)
    np.testing.assert_array_equal(replay.values(), trace.values())


def test_path_graph_equivalence_with_scaled_identity(path5_problem):
    strategy = WeightStrategy.scaled_identity(0.01)
    trace = run_simulation(path5_problem, np.zeros(5), seed=5, strategy=strategy, stop=StopCriteria(max_iters=400))
    assert trace_equivalence(path5_problem, np.zeros(5), trace, strategy) <= 1e-12


def test_second_order_weights_with_vector_blocks(vector_problem):
    strategy = WeightStrategy.second_order()
    x0 = np.zeros(vector_problem.layout.total_dim)
    trace = run_simulation(vector_problem, x0, seed=1, strategy=strategy,
                           stop=StopCriteria(max_iters=300), audit=True)
    assert trace_equivalence(vector_problem, x0, trace, strategy) <= 2e-10
    assert descent_monitor(trace, vector_problem) == []


def test_trace_length_mismatch(small_problem):
    stop = StopCriteria(max_iters=20, step_tol=0.0)
    a = run_simulation(small_problem, np.zeros(10), seed=0, strategy=LIPSCHITZ, stop=stop)
    b = replay_centralized(small_problem, np.zeros(10), a.blocks()[:10], LIPSCHITZ)
    with pytest.raises(AuditError):
        compare_traces(small_problem, a, b)


def test_max_time_stops_the_run(small_problem):
    trace = run_simulation(small_problem, np.zeros(10), seed=0, strategy=LIPSCHITZ,
                           stop=StopCriteria(max_iters=10_000, step_tol=0.0), max_time=5.0)
    assert trace.stop_reason == "max_time"
    assert all(t <= 5.0 for t in trace.sim_times())


def test_forced_wake_reschedules_the_timer(path5_problem):
    sim = Simulator(path5_problem, np.zeros(5), LIPSCHITZ, seed=0)
    stale = sim.nodes[2].deadline
    sim.wake(2)
    assert sim.nodes[2].deadline != stale
    for _ in range(50):
        sim.next_awake()
    assert all(event.time >= sim.now for event in sim.timers)


def test_next_fire_time_skips_stale_deadlines(path5_problem):
    sim = Simulator(path5_problem, np.zeros(5), LIPSCHITZ, seed=0)
    first = min(sim.timers)
    sim.wake(first.node)
    live = min(node.deadline for node in sim.nodes)
    assert sim.next_fire_time() == live
    assert sim.timers[0].time == live


def _force_first_wake(sim):
    first = min(sim.timers)
    sim.wake(first.node)
    return first.time, min(node.deadline for node in sim.nodes)


def test_max_time_ignores_a_stale_head(path5_problem, monkeypatch):
    for seed in range(20):
        stale, live = _force_first_wake(Simulator(path5_problem, np.zeros(5), LIPSCHITZ, seed=seed))
        if stale < live:
            break
    assert stale < live

    original = Simulator.__init__

    def init_then_force_wake(self, *args, **kwargs):
        original(self, *args, **kwargs)
        _force_first_wake(self)

    monkeypatch.setattr(Simulator, "__init__", init_then_force_wake)
    trace = run_simulation(path5_problem, np.zeros(5), seed=seed, strategy=LIPSCHITZ,
                           stop=StopCriteria(max_iters=10, step_tol=0.0), max_time=(stale + live) / 2)
    assert trace.stop_reason == "max_time"
    assert trace.records == []


def test_event_log_has_one_line_per_event(tmp_path, path5_problem):
    path = tmp_path / "events.log"
    with open(path, "w", encoding="utf-8") as f:
        log = Console(file=f, width=200, color_system=None)
        trace = run_simulation(path5_problem, np.zeros(5), seed=0, strategy=LIPSCHITZ,
                               stop=StopCriteria(max_iters=10, step_tol=0.0), event_log=log)
    lines = path.read_text().splitlines()
    total = sum(trace.info["messages"].get(k, 0) for k in ("state_broadcast", "gradient_only"))
    assert len(lines) == len(trace) + total
    assert lines[0].split()[1] == "timer_fire"


@pytest.mark.slow
def test_audit_holds_over_ten_thousand_awakes():
    graph = erdos_renyi_connected(50, 0.2, seed=2016)
    problem = generate_paper_instance(graph, seed=7)
    trace = run_simulation(problem, np.zeros(50), seed=11, strategy=LIPSCHITZ,
                           stop=StopCriteria(max_iters=10_000, step_tol=0.0), audit=True)
    assert len(trace) == 10_000


@pytest.mark.slow
def test_equivalence_over_seeded_runs():
    graph = erdos_renyi_connected(50, 0.2, seed=2016)
    problem = generate_paper_instance(graph, seed=7)
    for seed in range(10):
        trace = run_simulation(problem, np.zeros(50), seed=seed, strategy=LIPSCHITZ,
                               stop=StopCriteria(max_iters=1000, step_tol=0.0))
        assert trace_equivalence(problem, np.zeros(50), trace, LIPSCHITZ) <= 1e-12


@pytest.mark.slow
def test_full_scale_run_is_stationary():
    graph = erdos_renyi_connected(50, 0.2, seed=2016)
    problem = generate_paper_instance(graph, seed=7)
    trace = run_simulation(problem, np.zeros(50), seed=11, strategy=LIPSCHITZ, stop=StopCriteria())
    values = trace.values()
    assert np.all(np.diff(values) <= 1e-9)
    assert stationarity_residual(problem, trace.x_final, LIPSCHITZ) <= 1e-6
    assert abs(values[-500] - values[-1]) <= 1e-10
