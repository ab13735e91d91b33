import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from rich.console import Console

from partdescent.errors import ConfigError, NumericalError, ToleranceNotMetError
from partdescent.problem import (
    ConvexRegularizer,
    PartitionedProblem,
    block_hessian,
    block_lipschitz,
    partial_grad_f,
)

console = Console()

INNER_TOL = 1e-10
INNER_MAX_ITERS = 10_000
MIN_LIPSCHITZ = 1e-12
SECOND_ORDER_MARGIN = 1e-6
DOMINANCE_RTOL = 1e-12

STRATEGY_NAMES = ("lipschitz", "scaled_identity", "second_order")


@dataclass(frozen=True)
class WeightStrategy:
    """Choice of Q_i: L_i I, (1/alpha) I, or the block Hessian plus eps I."""

    name: str = "lipschitz"
    alpha: Optional[float] = None
    eps: Optional[float] = None

    def __post_init__(self):
        if self.name not in STRATEGY_NAMES:
            raise ConfigError(f"Unknown weight strategy {self.name!r}; expected one of {STRATEGY_NAMES}")
        if self.name == "scaled_identity" and (self.alpha is None or self.alpha <= 0):
            raise ConfigError(f"scaled_identity needs alpha > 0, got {self.alpha}")
        if self.eps is not None and self.eps < 0:
            raise ConfigError(f"second_order eps must be nonnegative, got {self.eps}")

    @classmethod
    def lipschitz(cls):
        return cls("lipschitz")

    @classmethod
    def scaled_identity(cls, alpha: float):
        return cls("scaled_identity", alpha=float(alpha))

    @classmethod
    def second_order(cls, eps: Optional[float] = None):
        return cls("second_order", eps=None if eps is None else float(eps))

    @classmethod
    def parse(cls, text: str) -> "WeightStrategy":
        """Parses "lipschitz", "scaled_identity:alpha=0.01" or "second_order[:eps=...]"."""
        name, _, rest = str(text).strip().partition(":")
        params = {}
        for item in filter(None, (p.strip() for p in rest.split(","))):
            key, sep, value = item.partition("=")
            if not sep:
                raise ConfigError(f"Malformed strategy parameter {item!r} in {text!r}")
            try:
                params[key.strip()] = float(value)
            except ValueError:
                raise ConfigError(f"Strategy parameter {key!r} must be a number, got {value!r}")
        allowed = {"lipschitz": set(), "scaled_identity": {"alpha"}, "second_order": {"eps"}}.get(name)
        if allowed is None:
            raise ConfigError(f"Unknown weight strategy {name!r}; expected one of {STRATEGY_NAMES}")
        unknown = set(params) - allowed
        if unknown:
            raise ConfigError(f"Strategy {name!r} does not accept {sorted(unknown)}")
        return cls(name, **params)

    def __str__(self):
        if self.name == "scaled_identity":
            return f"scaled_identity:alpha={self.alpha!r}"
        if self.name == "second_order" and self.eps is not None:
            return f"second_order:eps={self.eps!r}"
        return self.name

    @property
    def needs_hessian(self) -> bool:
        return self.name == "second_order"

    def weight(self, lipschitz: float, dim: int, hessian: Optional[np.ndarray] = None) -> np.ndarray:
        if self.name == "lipschitz":
            return max(lipschitz, MIN_LIPSCHITZ) * np.eye(dim)
        if self.name == "scaled_identity":
            return (1.0 / self.alpha) * np.eye(dim)
        if hessian is None:
            raise ConfigError("second_order weights need the block Hessian")
        eps = self.eps
        if eps is None:
            eps = max(0.0, lipschitz - float(np.linalg.eigvalsh(hessian)[0])) + SECOND_ORDER_MARGIN
        return hessian + eps * np.eye(dim)

    def guarantees_dominance(self, lipschitz: float) -> Optional[bool]:
        """True/False when Q_i >= L_i I is known up front, None when it must be checked numerically."""
        if self.name == "lipschitz":
            return True
        if self.name == "scaled_identity":
            return 1.0 / self.alpha >= lipschitz
        return True if self.eps is None else None


def block_weight(problem: PartitionedProblem, x: np.ndarray, i: int, strategy: WeightStrategy) -> np.ndarray:
    hessian = block_hessian(problem, x, i) if strategy.needs_hessian else None
    return strategy.weight(block_lipschitz(problem, i), problem.layout.block_dims[i], hessian)


def verify_weight_dominance(Q: np.ndarray, lipschitz: float) -> bool:
    """Q_i >= L_i I, up to a relative tolerance."""
    lam_min = float(np.linalg.eigvalsh(np.atleast_2d(Q))[0])
    return lam_min >= lipschitz - DOMINANCE_RTOL * max(1.0, abs(lipschitz))


def _is_diagonal(M: np.ndarray) -> bool:
    return np.array_equal(M, np.diag(np.diagonal(M)))


def _check_positive_definite(M: np.ndarray, what: str):
    if not np.array_equal(M, M.T):
        raise NumericalError(f"{what} is not symmetric")
    try:
        np.linalg.cholesky(M)
    except np.linalg.LinAlgError:
        raise NumericalError(f"{what} is not positive definite")


def prox_in_metric(
    M: np.ndarray,
    g: ConvexRegularizer,
    v: np.ndarray,
    tol: float = INNER_TOL,
    max_iters: int = INNER_MAX_ITERS,
) -> np.ndarray:
    """argmin_x g(x) + 1/2 (x - v)^T M (x - v) by proximal gradient steps of length 1/lambda_max(M)."""
    step = 1.0 / float(np.linalg.eigvalsh(M)[-1])
    x = g.prox_scalar(v, step)
    gap = math.inf
    for it in range(1, max_iters + 1):
        x_new = g.prox_scalar(x - step * (M @ (x - v)), step)
        gap = float(np.linalg.norm(x_new - x))
        x = x_new
        if gap <= tol:
            return x
    raise ToleranceNotMetError("Weighted prox did not converge", gap, max_iters)


def weighted_prox(
    W: np.ndarray,
    g: ConvexRegularizer,
    v: np.ndarray,
    tol: float = INNER_TOL,
    max_iters: int = INNER_MAX_ITERS,
) -> np.ndarray:
    """prox_{W,g}(v) = argmin_x g(x) + 1/2 ||x - v||^2_{W^{-1}}."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    v = np.atleast_1d(np.asarray(v, dtype=float))
    _check_positive_definite(W, "Prox weight W")
    if _is_diagonal(W):
        return g.prox_diagonal(v, np.diagonal(W).copy())
    return prox_in_metric(np.linalg.inv(W), g, v, tol, max_iters)


@dataclass
class LocalModel:
    """q_i(s; x) = grad^T s + 1/2 ||s||^2_Q + g_i(anchor + s)."""

    block: int
    gradient: np.ndarray
    weight: np.ndarray
    regularizer: ConvexRegularizer
    anchor: np.ndarray

    def value(self, s: np.ndarray) -> float:
        s = np.asarray(s, dtype=float)
        return float(self.gradient @ s + 0.5 * s @ (self.weight @ s)) + self.regularizer.value(self.anchor + s)

    def solve(self, tol: float = INNER_TOL, max_iters: int = INNER_MAX_ITERS) -> np.ndarray:
        """Minimizer of q_i, via the prox form x+ = prox_{Q^-1,g}(x - Q^-1 grad)."""
        Q = self.weight
        _check_positive_definite(Q, f"Weight matrix of block {self.block}")
        if _is_diagonal(Q):
            q = np.diagonal(Q)
            target = self.regularizer.prox_diagonal(self.anchor - self.gradient / q, 1.0 / q)
        else:
            v = self.anchor - np.linalg.solve(Q, self.gradient)
            target = prox_in_metric(Q, self.regularizer, v, tol, max_iters)
        return target - self.anchor


def solve_block(
    block: int,
    anchor: np.ndarray,
    gradient: np.ndarray,
    weight: np.ndarray,
    regularizer: ConvexRegularizer,
    tol: float = INNER_TOL,
    max_iters: int = INNER_MAX_ITERS,
) -> Tuple[np.ndarray, float]:
    model = LocalModel(block, gradient, weight, regularizer, anchor)
    d = model.solve(tol, max_iters)
    decrease = model.value(np.zeros_like(d)) - model.value(d)
    return d, decrease


def descent_direction(
    problem: PartitionedProblem,
    x: np.ndarray,
    i: int,
    strategy: WeightStrategy,
    tol: float = INNER_TOL,
    max_iters: int = INNER_MAX_ITERS,
) -> Tuple[np.ndarray, float]:
    """(d_i, q_i(0) - q_i(d_i)) for block i at x."""
    x = problem.layout.check_vector(x)
    gradient = partial_grad_f(problem, x, i)
    weight = block_weight(problem, x, i, strategy)
    anchor = x[problem.layout.block_slice(i)].copy()
    return solve_block(i, anchor, gradient, weight, problem.regularizers[i], tol, max_iters)


def dominance_report(problem: PartitionedProblem, x: np.ndarray, strategy: WeightStrategy) -> list:
    """Blocks whose weight at x fails Q_i >= L_i I."""
    failing = []
    for i in range(problem.num_blocks):
        L_i = block_lipschitz(problem, i)
        known = strategy.guarantees_dominance(L_i)
        if known is True:
            continue
        if known is False or not verify_weight_dominance(block_weight(problem, x, i, strategy), L_i):
            failing.append(i)
    if failing:
        console.log(
            f"[yellow]Weight strategy {strategy} violates Q_i >= L_i I on {len(failing)} of "
            f"{problem.num_blocks} blocks; the descent guarantee does not apply there[/yellow]"
        )
    return failing
