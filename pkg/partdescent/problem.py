import json
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from rich.console import Console

from partdescent.errors import ConfigError, LayoutError
from partdescent.partition import CommGraph, PartitionLayout, build_layout, graph_from_edges

console = Console()

INSTANCE_FORMAT = "partdescent-instance/1"

DEFAULT_BOUNDS = (-30.0, 20.0)
DEFAULT_SHIFT = 2.0
DATA_ENTRY_RANGE = 1.0
LINEAR_ENTRY_RANGE = 10.0

Bounds = Union[Tuple[float, float], Sequence[Tuple[float, float]]]


# --- smooth terms -----------------------------------------------------------

class SmoothLocalTerm(ABC):
    """Smooth local cost f_i(x_{N_i}) owned by node i.

    Subclasses work on the local vector x_{N_i}, the concatenation of the
    blocks in `support` (ascending order).
    """

    kind = "abstract"

    def __init__(self, owner: int, support: Sequence[int], layout: PartitionLayout):
        self.owner = int(owner)
        self.support = tuple(sorted(int(j) for j in support))
        dims = [layout.block_dims[j] for j in self.support]
        starts = np.concatenate(([0], np.cumsum(dims)[:-1])).astype(int)
        self._slices = {j: slice(int(s), int(s) + d) for j, s, d in zip(self.support, starts, dims)}
        self.local_dim = int(sum(dims))

    def local_slice(self, j: int) -> slice:
        try:
            return self._slices[j]
        except KeyError:
            raise LayoutError(f"Block {j} is not in the support of term {self.owner}")

    def gather(self, layout: PartitionLayout, x: np.ndarray) -> np.ndarray:
        return np.concatenate([x[layout.block_slice(j)] for j in self.support])

    def partial_gradient(self, x_local: np.ndarray, j: int) -> np.ndarray:
        return self.local_gradient(x_local)[self.local_slice(j)]

    def split_gradient(self, x_local: np.ndarray) -> Dict[int, np.ndarray]:
        """Every partial gradient of this term, computed from one gradient evaluation."""
        grad = self.local_gradient(x_local)
        return {j: grad[self.local_slice(j)].copy() for j in self.support}

    @abstractmethod
    def value(self, x_local: np.ndarray) -> float:
        ...

    @abstractmethod
    def local_gradient(self, x_local: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def lipschitz(self, j: int) -> float:
        """Lipschitz constant of the partial gradient w.r.t. block j under changes of block j."""

    def hessian_block(self, x_local: np.ndarray, j: int) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} does not provide Hessian blocks")

    def to_dict(self) -> dict:
        raise NotImplementedError(f"{type(self).__name__} cannot be serialized")


class IndefiniteQpTerm(SmoothLocalTerm):
    """f_i(x_{N_i}) = x_{N_i}^T H_i x_{N_i} + r_i^T x_{N_i} with H_i symmetric, possibly indefinite."""

    kind = "indefinite_qp"

    def __init__(self, owner, support, layout, H, r):
        super().__init__(owner, support, layout)
        H = np.asarray(H, dtype=float)
        r = np.asarray(r, dtype=float).reshape(-1)
        if H.shape != (self.local_dim, self.local_dim) or r.shape != (self.local_dim,):
            raise LayoutError(
                f"Term {owner}: expected H {self.local_dim}x{self.local_dim} and r of length "
                f"{self.local_dim}, got {H.shape} and {r.shape}"
            )
        if not np.array_equal(H, H.T):
            raise ConfigError(f"Term {owner}: H must be symmetric")
        self.H = H
        self.r = r

    def value(self, x_local):
        return float(x_local @ (self.H @ x_local) + self.r @ x_local)

    def local_gradient(self, x_local):
        return 2.0 * (self.H @ x_local) + self.r

    def lipschitz(self, j):
        sl = self.local_slice(j)
        return 2.0 * float(np.linalg.norm(self.H[sl, sl], 2))

    def hessian_block(self, x_local, j):
        sl = self.local_slice(j)
        return 2.0 * self.H[sl, sl]

    def to_dict(self):
        return {"kind": self.kind, "owner": self.owner, "H": self.H.tolist(), "r": self.r.tolist()}


# --- regularizers -----------------------------------------------------------

class ConvexRegularizer(ABC):
    """Proper, closed, convex g_i(x_i), separable across the entries of the block."""

    kind = "abstract"

    @abstractmethod
    def value(self, v: np.ndarray) -> float:
        ...

    @abstractmethod
    def prox_diagonal(self, v: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """argmin_x g(x) + 1/2 sum_k (x_k - v_k)^2 / weights_k."""

    def prox_scalar(self, v: np.ndarray, step: float) -> np.ndarray:
        return self.prox_diagonal(v, np.full(np.shape(v), float(step)))

    @abstractmethod
    def to_dict(self) -> dict:
        ...


class ZeroRegularizer(ConvexRegularizer):
    kind = "zero"

    def value(self, v):
        return 0.0

    def prox_diagonal(self, v, weights):
        return np.array(v, dtype=float)

    def to_dict(self):
        return {"kind": self.kind}


class BoxIndicator(ConvexRegularizer):
    kind = "box"

    def __init__(self, lower, upper):
        self.lower = np.atleast_1d(np.asarray(lower, dtype=float))
        self.upper = np.atleast_1d(np.asarray(upper, dtype=float))
        if np.any(self.lower >= self.upper):
            raise ConfigError(f"Box bounds need lower < upper, got {self.lower} and {self.upper}")

    def contains(self, v) -> bool:
        return bool(np.all(v >= self.lower) and np.all(v <= self.upper))

    def value(self, v):
        return 0.0 if self.contains(v) else math.inf

    def prox_diagonal(self, v, weights):
        # projection; the metric does not matter for a separable box
        return np.minimum(np.maximum(v, self.lower), self.upper)

    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def to_dict(self):
        return {"kind": self.kind, "lower": self.lower.tolist(), "upper": self.upper.tolist()}


class L1Norm(ConvexRegularizer):
    kind = "l1"

    def __init__(self, weight: float):
        if weight < 0:
            raise ConfigError(f"L1 weight must be nonnegative, got {weight}")
        self.weight = float(weight)

    def value(self, v):
        return self.weight * float(np.sum(np.abs(v)))

    def prox_diagonal(self, v, weights):
        thresh = self.weight * np.asarray(weights, dtype=float)
        return np.sign(v) * np.maximum(np.abs(v) - thresh, 0.0)

    def to_dict(self):
        return {"kind": self.kind, "weight": self.weight}


def regularizer_from_dict(data: dict) -> ConvexRegularizer:
    kind = data.get("kind")
    if kind == "zero":
        return ZeroRegularizer()
    if kind == "box":
        return BoxIndicator(data["lower"], data["upper"])
    if kind == "l1":
        return L1Norm(data["weight"])
    raise ConfigError(f"Unknown regularizer kind {kind!r}")


# --- the partitioned problem ------------------------------------------------

@dataclass(frozen=True)
class PartitionedProblem:
    layout: PartitionLayout
    graph: CommGraph
    smooth_terms: Tuple[SmoothLocalTerm, ...]
    regularizers: Tuple[ConvexRegularizer, ...]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.graph.num_nodes
        if self.layout.num_blocks != n:
            raise LayoutError(f"Layout has {self.layout.num_blocks} blocks but the graph has {n} nodes")
        if len(self.smooth_terms) != n or len(self.regularizers) != n:
            raise LayoutError("Need exactly one smooth term and one regularizer per node")
        for i, term in enumerate(self.smooth_terms):
            if term.owner != i or term.support != self.graph.neighbors(i):
                raise LayoutError(f"Term {i} must be owned by node {i} and supported on its neighborhood")

    @property
    def num_blocks(self) -> int:
        return self.layout.num_blocks

    def gather(self, x: np.ndarray, j: int) -> np.ndarray:
        return self.smooth_terms[j].gather(self.layout, x)

    def block(self, x: np.ndarray, i: int) -> np.ndarray:
        return x[self.layout.block_slice(i)]


def sum_contributions(contributions: List[np.ndarray], shape) -> np.ndarray:
    """Fixed-order sum of per-term contributions; the simulator and the CD share it."""
    total = np.zeros(shape)
    for c in contributions:
        total = total + c
    return total


def smooth_value(problem: PartitionedProblem, x) -> float:
    x = problem.layout.check_vector(x)
    return float(sum(term.value(problem.gather(x, i)) for i, term in enumerate(problem.smooth_terms)))


def aggregate_value(problem: PartitionedProblem, x) -> float:
    x = problem.layout.check_vector(x)
    g_total = 0.0
    for i, reg in enumerate(problem.regularizers):
        gi = reg.value(problem.block(x, i))
        if math.isinf(gi):
            return math.inf
        g_total += gi
    return smooth_value(problem, x) + g_total


def partial_grad_f(problem: PartitionedProblem, x, i: int) -> np.ndarray:
    """i-th block of grad f(x): sum over j in N_i of grad_{x_i} f_j(x_{N_j})."""
    x = problem.layout.check_vector(x)
    contributions = [
        problem.smooth_terms[j].partial_gradient(problem.gather(x, j), i)
        for j in problem.graph.neighbors(i)
    ]
    return sum_contributions(contributions, problem.layout.block_dims[i])


def full_gradient(problem: PartitionedProblem, x) -> np.ndarray:
    return np.concatenate([partial_grad_f(problem, x, i) for i in range(problem.num_blocks)])


def block_lipschitz(problem: PartitionedProblem, i: int) -> float:
    """L_i = sum of L_{ji} over the terms f_j that depend on x_i."""
    return float(sum(problem.smooth_terms[j].lipschitz(i) for j in problem.graph.neighbors(i)))


def block_hessian(problem: PartitionedProblem, x, i: int) -> np.ndarray:
    x = problem.layout.check_vector(x)
    n_i = problem.layout.block_dims[i]
    blocks = [problem.smooth_terms[j].hessian_block(problem.gather(x, j), i) for j in problem.graph.neighbors(i)]
    return sum_contributions(blocks, (n_i, n_i))


def local_value_change(problem: PartitionedProblem, x, i: int, new_block: np.ndarray) -> float:
    """V(x + U_i(new_block - x_i)) - V(x), summed over the terms that see block i only."""
    x_new = np.array(x, dtype=float)
    x_new[problem.layout.block_slice(i)] = new_block
    delta = 0.0
    for j in problem.graph.neighbors(i):
        term = problem.smooth_terms[j]
        delta += term.value(problem.gather(x_new, j)) - term.value(problem.gather(x, j))
    reg = problem.regularizers[i]
    g_new = reg.value(new_block)
    g_old = reg.value(problem.block(x, i))
    if math.isinf(g_new) or math.isinf(g_old):
        return math.inf if math.isinf(g_new) else -math.inf
    return delta + (g_new - g_old)


def stationarity_residual(problem: PartitionedProblem, x, strategy) -> float:
    """max_i ||d_i(x)||, zero exactly at first-order stationary points."""
    from partdescent.local_model import descent_direction

    x = problem.layout.check_vector(x)
    return max(float(np.linalg.norm(descent_direction(problem, x, i, strategy)[0]))
               for i in range(problem.num_blocks))


# --- instance generation ----------------------------------------------------

def _expand_bounds(bounds: Bounds, n: int) -> List[Tuple[float, float]]:
    arr = np.asarray(bounds, dtype=float)
    if arr.shape == (2,):
        return [(float(arr[0]), float(arr[1]))] * n
    if arr.shape == (n, 2):
        return [(float(lo), float(hi)) for lo, hi in arr]
    raise ConfigError(f"Bounds must be a (lower, upper) pair or one pair per node, got shape {arr.shape}")


def generate_paper_instance(
    graph: CommGraph,
    seed: int,
    bounds: Bounds = DEFAULT_BOUNDS,
    shift: float = DEFAULT_SHIFT,
    block_dims: Optional[Sequence[int]] = None,
) -> PartitionedProblem:
    """Box-constrained indefinite QP: H_i = A^T A + I - shift*I, r_i uniform, g_i box indicator."""
    if shift <= 0:
        raise ConfigError(f"The identity shift must be positive, got {shift}")

    n = graph.num_nodes
    layout = build_layout(block_dims if block_dims is not None else [1] * n)
    box = _expand_bounds(bounds, n)
    rng = np.random.default_rng(seed)

    terms = []
    regs = []
    indefinite = 0
    for i in range(n):
        support = graph.neighbors(i)
        m = sum(layout.block_dims[j] for j in support)
        A = rng.uniform(-DATA_ENTRY_RANGE, DATA_ENTRY_RANGE, size=(m, m))
        H = A.T @ A + (1.0 - shift) * np.eye(m)
        H = 0.5 * (H + H.T)
        r = rng.uniform(-LINEAR_ENTRY_RANGE, LINEAR_ENTRY_RANGE, size=m)
        if np.linalg.eigvalsh(H)[0] < 0:
            indefinite += 1
        terms.append(IndefiniteQpTerm(i, support, layout, H, r))
        lo, hi = box[i]
        dim = layout.block_dims[i]
        regs.append(BoxIndicator(np.full(dim, lo), np.full(dim, hi)))

    if indefinite == 0:
        console.log(f"[yellow]No indefinite H_i generated with shift {shift}; the instance is convex[/yellow]")
    else:
        console.log(f"[dim]Generated {n} QP terms, {indefinite} indefinite (seed {seed}, shift {shift})[/dim]")

    provenance = {"generator": "indefinite_qp", "seed": int(seed), "shift": float(shift), "indefinite_terms": indefinite}
    return PartitionedProblem(layout, graph, tuple(terms), tuple(regs), provenance)


def zero_instance(graph: CommGraph, bounds: Bounds = DEFAULT_BOUNDS) -> PartitionedProblem:
    """All-zero QP data with box constraints; V vanishes on the feasible set."""
    n = graph.num_nodes
    layout = build_layout([1] * n)
    terms = []
    for i in range(n):
        m = len(graph.neighbors(i))
        terms.append(IndefiniteQpTerm(i, graph.neighbors(i), layout, np.zeros((m, m)), np.zeros(m)))
    regs = [BoxIndicator([lo], [hi]) for lo, hi in _expand_bounds(bounds, n)]
    return PartitionedProblem(layout, graph, tuple(terms), tuple(regs), {"generator": "zero"})


def feasible_start(problem: PartitionedProblem) -> np.ndarray:
    """Zeros when 0 lies in every box, otherwise box midpoints."""
    x0 = np.zeros(problem.layout.total_dim)
    for i, reg in enumerate(problem.regularizers):
        if isinstance(reg, BoxIndicator) and not reg.contains(np.zeros_like(reg.lower)):
            x0[problem.layout.block_slice(i)] = reg.midpoint()
    return x0


# --- instance documents -----------------------------------------------------

def problem_to_dict(problem: PartitionedProblem) -> dict:
    return {
        "format": INSTANCE_FORMAT,
        "block_dims": list(problem.layout.block_dims),
        "num_nodes": problem.graph.num_nodes,
        "edges": [list(e) for e in problem.graph.edges()],
        "terms": [term.to_dict() for term in problem.smooth_terms],
        "regularizers": [reg.to_dict() for reg in problem.regularizers],
        "provenance": problem.provenance,
    }


def problem_from_dict(data: dict) -> PartitionedProblem:
    if data.get("format") != INSTANCE_FORMAT:
        raise ConfigError(f"Unsupported instance format {data.get('format')!r}")
    layout = build_layout(data["block_dims"])
    graph = graph_from_edges(data["num_nodes"], [tuple(e) for e in data["edges"]])
    terms = []
    for entry in data["terms"]:
        if entry.get("kind") != IndefiniteQpTerm.kind:
            raise ConfigError(f"Unknown smooth term kind {entry.get('kind')!r}")
        owner = entry["owner"]
        terms.append(IndefiniteQpTerm(owner, graph.neighbors(owner), layout, entry["H"], entry["r"]))
    regs = [regularizer_from_dict(entry) for entry in data["regularizers"]]
    return PartitionedProblem(layout, graph, tuple(terms), tuple(regs), dict(data.get("provenance", {})))


def save_instance(problem: PartitionedProblem, path: Path) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(problem_to_dict(problem), f, indent=1)
    console.log(f"[green]Instance written:[/green] {path}")
    return path


def load_instance(path: Path) -> PartitionedProblem:
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"Cannot read instance file {path}: {e}")
    return problem_from_dict(data)
