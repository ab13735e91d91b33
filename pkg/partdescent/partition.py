from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Sequence, Tuple

import networkx as nx
import numpy as np
from rich.console import Console

from partdescent.errors import GraphError, LayoutError

console = Console()

MAX_CONNECT_ATTEMPTS = 1000


@dataclass(frozen=True)
class PartitionLayout:
    """Block layout of the stacked vector x = [x_0; x_1; ...; x_{N-1}]."""

    block_dims: Tuple[int, ...]
    offsets: Tuple[int, ...]
    total_dim: int

    @property
    def num_blocks(self) -> int:
        return len(self.block_dims)

    def block_slice(self, i: int) -> slice:
        if not 0 <= i < self.num_blocks:
            raise LayoutError(f"Block index {i} out of range for {self.num_blocks} blocks")
        return slice(self.offsets[i], self.offsets[i] + self.block_dims[i])

    def check_vector(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.total_dim,):
            raise LayoutError(f"Expected a vector of length {self.total_dim}, got shape {x.shape}")
        return x


def build_layout(block_dims: Sequence[int]) -> PartitionLayout:
    dims = tuple(int(d) for d in block_dims)
    if not dims:
        raise LayoutError("A layout needs at least one block")
    if any(d < 1 for d in dims):
        raise LayoutError(f"Block dimensions must be positive, got {list(dims)}")
    offsets = tuple(int(o) for o in np.concatenate(([0], np.cumsum(dims)[:-1])))
    return PartitionLayout(block_dims=dims, offsets=offsets, total_dim=sum(dims))


def extract_block(layout: PartitionLayout, x: np.ndarray, i: int) -> np.ndarray:
    """x_i = U_i^T x, returned as a copy."""
    x = layout.check_vector(x)
    return x[layout.block_slice(i)].copy()


def lift_block(layout: PartitionLayout, v: np.ndarray, i: int) -> np.ndarray:
    """U_i v: block i set to v, every other block zero."""
    sl = layout.block_slice(i)
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape[0] != layout.block_dims[i]:
        raise LayoutError(f"Block {i} has dimension {layout.block_dims[i]}, got {v.shape[0]}")
    out = np.zeros(layout.total_dim)
    out[sl] = v
    return out


@dataclass(frozen=True)
class CommGraph:
    """Undirected communication graph; every neighbor set contains its own node."""

    num_nodes: int
    adjacency: Tuple[Tuple[int, ...], ...]

    def neighbors(self, i: int) -> Tuple[int, ...]:
        return self.adjacency[i]

    def degree(self, i: int) -> int:
        return len(self.adjacency[i])

    def edges(self) -> List[Tuple[int, int]]:
        return [(i, j) for i in range(self.num_nodes) for j in self.adjacency[i] if i < j]

    def to_networkx(self) -> nx.Graph:
        g = nx.Graph()
        g.add_nodes_from(range(self.num_nodes))
        g.add_edges_from(self.edges())
        return g

    def is_connected(self) -> bool:
        return nx.is_connected(self.to_networkx())


def graph_from_edges(num_nodes: int, edges: Iterable[Tuple[int, int]]) -> CommGraph:
    if num_nodes < 1:
        raise GraphError("A graph needs at least one node")
    nbrs = [{i} for i in range(num_nodes)]
    for i, j in edges:
        i, j = int(i), int(j)
        if not (0 <= i < num_nodes and 0 <= j < num_nodes):
            raise GraphError(f"Edge ({i}, {j}) references a node outside 0..{num_nodes - 1}")
        nbrs[i].add(j)
        nbrs[j].add(i)
    return CommGraph(num_nodes=num_nodes, adjacency=tuple(tuple(sorted(s)) for s in nbrs))


def _sub_seed(seed: int, attempt: int) -> int:
    return int(np.random.SeedSequence([int(seed), attempt]).generate_state(1)[0])


def erdos_renyi_connected(n: int, p: float, seed: int) -> CommGraph:
    """G(n, p) graph, regenerated with derived sub-seeds until it is connected."""
    if n < 2:
        raise GraphError(f"Need at least 2 nodes, got {n}")
    if not 0 <= p <= 1:
        raise GraphError(f"Edge probability must lie in [0, 1], got {p}")

    for attempt in range(MAX_CONNECT_ATTEMPTS):
        g = nx.gnp_random_graph(n, p, seed=_sub_seed(seed, attempt))
        if nx.is_connected(g):
            if attempt > 0:
                console.log(f"[dim]Connected Erdos-Renyi graph found after {attempt + 1} draws[/dim]")
            return graph_from_edges(n, g.edges())

    raise GraphError(f"No connected G({n}, {p}) graph after {MAX_CONNECT_ATTEMPTS} draws (seed {seed})")


def path_graph(n: int) -> CommGraph:
    return graph_from_edges(n, [(i, i + 1) for i in range(n - 1)])


def complete_graph(n: int) -> CommGraph:
    return graph_from_edges(n, [(i, j) for i in range(n) for j in range(i + 1, n)])


def write_edge_list(graph: CommGraph, path: Path) -> Path:
    lines = [f"# nodes {graph.num_nodes}"] + [f"{i} {j}" for i, j in graph.edges()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return Path(path)


def read_edge_list(path: Path, num_nodes: int = None) -> CommGraph:
    """Reads "i j" lines (0-based). Self-edges are implicit and re-added."""
    edges = []
    declared = None
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "nodes":
                declared = int(parts[1])
            continue
        try:
            i, j = (int(tok) for tok in line.split())
        except ValueError:
            raise GraphError(f"Malformed edge line in {path}: {raw!r}")
        if i != j:
            edges.append((i, j))

    if num_nodes is None:
        num_nodes = declared
    if num_nodes is None:
        num_nodes = 1 + max((max(e) for e in edges), default=0)
    return graph_from_edges(num_nodes, edges)
