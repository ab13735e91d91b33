import numpy as np
import pytest

from partdescent import database
from partdescent.partition import erdos_renyi_connected, path_graph
from partdescent.problem import generate_paper_instance


@pytest.fixture
def path5_problem():
    return generate_paper_instance(path_graph(5), seed=5)


@pytest.fixture
def small_problem():
    graph = erdos_renyi_connected(10, 0.3, seed=1)
    return generate_paper_instance(graph, seed=2)


@pytest.fixture
def vector_problem():
    graph = erdos_renyi_connected(6, 0.5, seed=4)
    return generate_paper_instance(graph, seed=9, block_dims=[2, 1, 3, 2, 1, 2])


@pytest.fixture
def interior_point():
    def make(problem, seed=0):
        rng = np.random.default_rng(seed)
        return rng.uniform(-25.0, 15.0, size=problem.layout.total_dim)

    return make


@pytest.fixture
def registry(tmp_path):
    previous = database.engine.url
    database.configure(f"sqlite:///{tmp_path / 'registry.db'}")
    database.init_db()
    yield database
    database.engine.dispose()
    database.configure(previous)


@pytest.fixture
def make_qp():
    """Hand-written QP problem: one (H, r) per node and one regularizer per node (None means zero)."""
    from partdescent.partition import build_layout
    from partdescent.problem import IndefiniteQpTerm, PartitionedProblem, ZeroRegularizer

    def make(graph, Hs, rs, regularizers=None, block_dims=None):
        layout = build_layout(block_dims or [1] * graph.num_nodes)
        terms = tuple(
            IndefiniteQpTerm(i, graph.neighbors(i), layout, np.asarray(H, dtype=float), np.asarray(r, dtype=float))
            for i, (H, r) in enumerate(zip(Hs, rs))
        )
        regs = tuple(reg or ZeroRegularizer() for reg in (regularizers or [None] * graph.num_nodes))
        return PartitionedProblem(layout, graph, terms, regs)

    return make
