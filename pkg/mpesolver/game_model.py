"""
Game model: rates, costs, Hamiltonian and generators.

Rate vectors live in ``R_+^{d-1}`` and are indexed by destination ``y != x``
with the convention ``a_y`` for ``y < x`` and ``a_{y-1}`` for ``y > x``
(0-based here). :func:`rate_slot`, :func:`pack_rates` and
:func:`unpack_rates` are the only places that know about it.

Two layers are provided. The pointwise methods (``minimizer``,
``hamiltonian``, ``tagged_generator``, ``population_generator``) follow the
formulas literally and take callables over the joint state space. The table
methods (``*_table``, ``tagged_term``, ``population_term``) evaluate the same
quantities on dense arrays of shape ``(d, |Sigma|, ...)`` and are what the
ODE right-hand sides use.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from functools import cached_property
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .state_space import CountVector, JointSpace

logger = logging.getLogger(__name__)

RateFn = Callable[[int, CountVector], Sequence[float]]
StateFn = Callable[[int, CountVector], float]
ValueSlice = Callable[[int, CountVector], float]
ControlAt = Callable[[int, CountVector], Sequence[float]]

DEFAULT_TABLE_CAP = 10**7


def destinations(d: int, x: int) -> List[int]:
    """States reachable from *x*, in rate-vector order."""
    return [y for y in range(d) if y != x]


def rate_slot(x: int, y: int) -> int:
    """Position of destination *y* inside a rate vector attached to *x*."""
    if y == x:
        raise ValueError(f"no rate slot for the diagonal ({x} -> {y})")
    return y if y < x else y - 1


def pack_rates(x: int, row: Sequence[float]) -> np.ndarray:
    """Drop the diagonal entry of a length-``d`` row of destination rates."""
    arr = np.asarray(row, dtype=float)
    return np.delete(arr, x)


def unpack_rates(x: int, vec: Sequence[float]) -> np.ndarray:
    """Inverse of :func:`pack_rates`; the diagonal entry is set to 0."""
    arr = np.asarray(vec, dtype=float)
    return np.insert(arr, x, 0.0)


def delta_x(v_slice: ValueSlice, x: int, mu: CountVector) -> np.ndarray:
    """First difference vector ``(v(y, mu) - v(x, mu))_{y != x}``."""
    base = v_slice(x, mu)
    return np.array([v_slice(y, mu) - base for y in destinations(len(mu), x)], dtype=float)


class CostModel(ABC):
    """Running cost ``l(x, mu, a)`` together with its Hamiltonian minimizer."""

    #: strong convexity modulus of ``a -> l(x, mu, a)``
    gamma: float = 1.0

    @abstractmethod
    def running(self, x: int, mu: CountVector, a: Any) -> Any:
        """Running cost; *a* may carry leading batch axes (numpy or torch)."""

    @abstractmethod
    def minimizer(
        self, x: int, mu: CountVector, p: np.ndarray, lam1: np.ndarray
    ) -> np.ndarray:
        """``argmin_{a >= 0} l(x, mu, a) + sum_y a_y lam1_y p_y``."""

    def state_cost(self, x: int, mu: CountVector) -> float:
        return float(self.running(x, mu, np.zeros(len(mu) - 1)))


class QuadraticCost(CostModel):
    """``l(x, mu, a) = |a|^2 / 2 + f(x, mu)``.

    :param state_cost: Optional callback ``f``; ``None`` means ``f = 0``.
    """

    gamma = 1.0

    def __init__(self, state_cost: Optional[StateFn] = None) -> None:
        self._state_cost = state_cost

    def state_cost(self, x: int, mu: CountVector) -> float:
        if self._state_cost is None:
            return 0.0
        return float(self._state_cost(x, mu))

    def running(self, x: int, mu: CountVector, a: Any) -> Any:
        return 0.5 * (a * a).sum(-1) + self.state_cost(x, mu)

    def minimizer(
        self, x: int, mu: CountVector, p: np.ndarray, lam1: np.ndarray
    ) -> np.ndarray:
        return np.maximum(0.0, -np.asarray(lam1, dtype=float) * np.asarray(p, dtype=float))


class CustomCost(CostModel):
    """User-supplied running cost and minimizer, always given together.

    No numerical inner minimization is attempted; *minimizer* must return
    the exact argmin for the supplied running cost.
    """

    def __init__(
        self,
        running: Callable[[int, CountVector, Any], Any],
        minimizer: Callable[[int, CountVector, np.ndarray, np.ndarray], Sequence[float]],
        *,
        gamma: float,
    ) -> None:
        if gamma <= 0:
            raise ValueError(f"strong convexity modulus must be positive, got {gamma}")
        self._running = running
        self._minimizer = minimizer
        self.gamma = float(gamma)

    def running(self, x: int, mu: CountVector, a: Any) -> Any:
        return self._running(x, mu, a)

    def minimizer(
        self, x: int, mu: CountVector, p: np.ndarray, lam1: np.ndarray
    ) -> np.ndarray:
        return np.asarray(self._minimizer(x, mu, p, lam1), dtype=float)


@dataclass(frozen=True)
class RateTables:
    """Dense tables of the model callbacks over the joint state space."""

    lam0: np.ndarray  # (d, S, d-1)
    lam1: np.ndarray  # (d, S, d-1)
    state_cost: np.ndarray  # (d, S)
    terminal: np.ndarray  # (d, S)


class _PopulationStencil:
    """Index arrays for the untagged generator, one entry per (x, z, y)."""

    def __init__(self, space: JointSpace) -> None:
        counts = space.simplex.counts
        self.terms: List[Tuple[int, int, int, np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []
        for z in range(space.d):
            rows = np.flatnonzero(counts[:, z] >= 1)
            n_z = counts[rows, z].astype(float)
            for x in range(space.d):
                view = space.view_index[x, z, rows]
                for y in destinations(space.d, z):
                    target = space.move_index[z, y, rows]
                    self.terms.append((x, z, rate_slot(z, y), rows, n_z, view, target))


class GameModel:
    """Symmetric ``N+1`` player game on ``d`` states over ``[0, T]``.

    :param d: Number of states.
    :param N: Number of untagged players.
    :param T: Time horizon.
    :param lambda0: Uncontrolled rates ``(x, counts) -> R_+^{d-1}``.
    :param lambda1: Control gains ``(x, counts) -> R_+^{d-1}``.
    :param cost: Running cost model.
    :param terminal: Terminal cost ``g(x, counts) >= 0``.
    :param table_cap: Largest ``d * |Sigma|`` for which the per-state lookups
        (``lambda0_at`` and friends) read :attr:`tables` instead of calling the
        callbacks. It does not bound memory: field solves and
        :meth:`compute_bounds` build :attr:`tables` regardless.
    """

    def __init__(
        self,
        d: int,
        N: int,
        T: float,
        lambda0: RateFn,
        lambda1: RateFn,
        cost: CostModel,
        terminal: StateFn,
        *,
        name: str = "custom",
        state_labels: Optional[Sequence[str]] = None,
        table_cap: int = DEFAULT_TABLE_CAP,
        metadata: Optional[Mapping[str, Any]] = None,
    ) -> None:
        if T <= 0:
            raise ValueError(f"time horizon must be positive, got {T}")
        self.space = JointSpace(d, N)
        self.d = d
        self.N = N
        self.T = float(T)
        self.lambda0 = lambda0
        self.lambda1 = lambda1
        self.cost = cost
        self.terminal = terminal
        self.name = name
        labels = list(state_labels) if state_labels is not None else [str(x + 1) for x in range(d)]
        if len(labels) != d:
            raise ValueError(f"expected {d} state labels, got {labels}")
        self.state_labels = labels
        self.memoized = d * self.space.size <= table_cap
        self.metadata: Dict[str, Any] = dict(metadata or {})
        self._dest = np.array([destinations(d, x) for x in range(d)], dtype=np.int64)

    def __repr__(self) -> str:
        return f"GameModel(name={self.name!r}, d={self.d}, N={self.N}, T={self.T})"

    # ----------------------------------------------------------- callbacks
    def _checked_rates(self, fn: RateFn, what: str, x: int, mu: CountVector) -> np.ndarray:
        vec = np.asarray(fn(x, mu), dtype=float)
        if vec.shape != (self.d - 1,):
            raise ValueError(f"{what}({x}, {mu}) must have length {self.d - 1}, got {vec.shape}")
        if not np.all(np.isfinite(vec)) or np.any(vec < 0):
            raise ValueError(f"{what}({x}, {mu}) must be finite and nonnegative, got {vec}")
        return vec

    @cached_property
    def tables(self) -> RateTables:
        d, S = self.d, self.space.size
        lam0 = np.empty((d, S, d - 1))
        lam1 = np.empty((d, S, d - 1))
        fvals = np.empty((d, S))
        gvals = np.empty((d, S))
        for i, mu in enumerate(self.space.simplex):
            for x in range(d):
                lam0[x, i] = self._checked_rates(self.lambda0, "lambda0", x, mu)
                lam1[x, i] = self._checked_rates(self.lambda1, "lambda1", x, mu)
                fvals[x, i] = self.cost.state_cost(x, mu)
                gvals[x, i] = float(self.terminal(x, mu))
        if np.any(gvals < 0) or not np.all(np.isfinite(gvals)):
            raise ValueError("terminal cost must be finite and nonnegative")
        for arr in (lam0, lam1, fvals, gvals):
            arr.setflags(write=False)
        return RateTables(lam0=lam0, lam1=lam1, state_cost=fvals, terminal=gvals)

    def lambda0_at(self, x: int, mu_index: int) -> np.ndarray:
        if self.memoized:
            return self.tables.lam0[x, mu_index]
        return self._checked_rates(self.lambda0, "lambda0", x, self.space.counts(mu_index))

    def lambda1_at(self, x: int, mu_index: int) -> np.ndarray:
        if self.memoized:
            return self.tables.lam1[x, mu_index]
        return self._checked_rates(self.lambda1, "lambda1", x, self.space.counts(mu_index))

    def state_cost_at(self, x: int, mu_index: int) -> float:
        if self.memoized:
            return float(self.tables.state_cost[x, mu_index])
        return self.cost.state_cost(x, self.space.counts(mu_index))

    def terminal_at(self, x: int, mu_index: int) -> float:
        if self.memoized:
            return float(self.tables.terminal[x, mu_index])
        return float(self.terminal(x, self.space.counts(mu_index)))

    def running_cost(self, x: int, mu: CountVector, a: Any) -> Any:
        return self.cost.running(x, mu, a)

    # ----------------------------------------------------------- pointwise
    def minimizer(self, x: int, mu: CountVector, p: Sequence[float]) -> np.ndarray:
        lam1 = self._checked_rates(self.lambda1, "lambda1", x, mu)
        return self.cost.minimizer(x, mu, np.asarray(p, dtype=float), lam1)

    def hamiltonian(self, x: int, mu: CountVector, p: Sequence[float]) -> float:
        p = np.asarray(p, dtype=float)
        a = self.minimizer(x, mu, p)
        return self.pre_hamiltonian(x, mu, p, a)

    def pre_hamiltonian(
        self, x: int, mu: CountVector, p: Sequence[float], a: Sequence[float]
    ) -> float:
        """``l(x, mu, a) + sum_y (lam0_y + lam1_y a_y) p_y`` for a fixed action."""
        p = np.asarray(p, dtype=float)
        a = np.asarray(a, dtype=float)
        lam0 = self._checked_rates(self.lambda0, "lambda0", x, mu)
        lam1 = self._checked_rates(self.lambda1, "lambda1", x, mu)
        return float(self.cost.running(x, mu, a)) + float(np.dot(lam0 + lam1 * a, p))

    def tagged_generator(
        self, v_slice: ValueSlice, alpha_at: ControlAt, x: int, mu: CountVector
    ) -> float:
        lam0 = self._checked_rates(self.lambda0, "lambda0", x, mu)
        lam1 = self._checked_rates(self.lambda1, "lambda1", x, mu)
        alpha = np.asarray(alpha_at(x, mu), dtype=float)
        return float(np.dot(lam0 + lam1 * alpha, delta_x(v_slice, x, mu)))

    def population_generator(
        self, v_slice: ValueSlice, beta_at: ControlAt, x: int, mu: CountVector
    ) -> float:
        total = 0.0
        base = v_slice(x, mu)
        for z in range(self.d):
            n_z = mu[z]
            if n_z == 0:
                continue
            view = list(mu)
            view[x] += 1
            view[z] -= 1
            view = tuple(view)
            lam0 = self._checked_rates(self.lambda0, "lambda0", z, view)
            lam1 = self._checked_rates(self.lambda1, "lambda1", z, view)
            beta = np.asarray(beta_at(z, view), dtype=float)
            for y in destinations(self.d, z):
                j = rate_slot(z, y)
                moved = list(mu)
                moved[z] -= 1
                moved[y] += 1
                total += n_z * (lam0[j] + lam1[j] * beta[j]) * (v_slice(x, tuple(moved)) - base)
        return total

    def compute_bounds(self) -> Tuple[float, float]:
        """Return ``(c_v, c_a)`` from the a priori value and control bounds."""
        tab = self.tables
        zero = np.zeros(self.d - 1)
        c_v = float(np.max(self.T * tab.state_cost + tab.terminal))
        a0 = 0.0
        for i, mu in enumerate(self.space.simplex):
            for x in range(self.d):
                a = self.cost.minimizer(x, mu, zero, tab.lam1[x, i])
                a0 = max(a0, float(np.linalg.norm(a)))
        lam1_max = float(np.max(tab.lam1)) if tab.lam1.size else 0.0
        c_a = a0 + 2.0 * lam1_max * c_v * np.sqrt(self.d - 1) / self.cost.gamma
        return c_v, float(c_a)

    # -------------------------------------------------------------- tables
    @cached_property
    def _stencil(self) -> _PopulationStencil:
        return _PopulationStencil(self.space)

    def differences(self, v: np.ndarray) -> np.ndarray:
        """``Delta_x v`` for every state; ``(..., d, S) -> (..., d, S, d-1)``."""
        gathered = v[..., self._dest, :]  # (..., d, d-1, S)
        diff = gathered - v[..., :, None, :]
        return np.swapaxes(diff, -1, -2)

    def minimizer_table(self, p: np.ndarray) -> np.ndarray:
        lam1 = self.tables.lam1
        if isinstance(self.cost, QuadraticCost):
            return np.maximum(0.0, -lam1 * p)
        out = np.empty_like(p)
        lead = p.shape[:-3]
        for idx in np.ndindex(*lead):
            for i, mu in enumerate(self.space.simplex):
                for x in range(self.d):
                    out[idx + (x, i)] = self.cost.minimizer(x, mu, p[idx + (x, i)], lam1[x, i])
        return out

    def running_table(self, a: np.ndarray) -> np.ndarray:
        """``l(x, mu, a(x, mu))`` for an action table ``(d, S, d-1)``."""
        if isinstance(self.cost, QuadraticCost):
            return 0.5 * np.sum(a * a, axis=-1) + self.tables.state_cost
        out = np.empty(a.shape[:-1])
        for i, mu in enumerate(self.space.simplex):
            for x in range(self.d):
                out[x, i] = float(self.cost.running(x, mu, a[x, i]))
        return out

    def hamiltonian_table(self, p: np.ndarray) -> np.ndarray:
        tab = self.tables
        a = self.minimizer_table(p)
        if isinstance(self.cost, QuadraticCost):
            return tab.state_cost + np.sum(tab.lam0 * p, axis=-1) - 0.5 * np.sum(a * a, axis=-1)
        return self.running_table(a) + np.sum((tab.lam0 + tab.lam1 * a) * p, axis=-1)

    def tagged_term(self, v: np.ndarray, alpha: np.ndarray) -> np.ndarray:
        tab = self.tables
        return np.sum((tab.lam0 + tab.lam1 * alpha) * self.differences(v), axis=-1)

    def population_term(self, v: np.ndarray, beta: np.ndarray) -> np.ndarray:
        tab = self.tables
        out = np.zeros_like(v)
        for x, z, j, rows, n_z, view, target in self._stencil.terms:
            rate = tab.lam0[z, view, j] + tab.lam1[z, view, j] * beta[z, view, j]
            out[x, rows] += n_z * rate * (v[x, target] - v[x, rows])
        return out


__all__ = [
    "CostModel",
    "CustomCost",
    "GameModel",
    "QuadraticCost",
    "RateTables",
    "delta_x",
    "destinations",
    "pack_rates",
    "rate_slot",
    "unpack_rates",
]
