"""
Backward ODE solves over value fields.

Three systems share one integrator:

* ``HJB(beta)``: ``-dv/dt = H(x, mu, Delta_x v) + L^beta_mu v``;
* the coupled N-NLL system, where the untagged control is recomputed from
  the current ``v`` inside every right-hand side evaluation;
* linear policy evaluation: ``-dk/dt = l(x, mu, alpha) + L^alpha_x k + L^beta_mu k``.

The full field of dimension ``d * |Sigma|`` is integrated as one system with
scipy's Dormand-Prince 5(4) pair (``RK45``) from ``T`` down to ``0``; node
values come from the dense output so they do not depend on the step
sequence. Controls are piecewise linear in time between grid nodes and
clamped at zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, NamedTuple, Optional, Tuple

import numpy as np
from scipy.integrate import solve_ivp

from .game_model import GameModel
from .state_space import CountVector, JointSpace

logger = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Numerical failure of a solve.

    :param time: Time at which the failure was detected, when known.
    :param state: ``(x, counts)`` of the offending state, when known.
    """

    def __init__(
        self,
        message: str,
        *,
        time: Optional[float] = None,
        state: Optional[Tuple[int, CountVector]] = None,
    ) -> None:
        super().__init__(message)
        self.time = time
        self.state = state


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_k = k T / M``, ``k = 0..M``."""

    T: float
    M: int

    def __post_init__(self) -> None:
        if self.T <= 0:
            raise ValueError(f"time horizon must be positive, got {self.T}")
        if self.M < 1:
            raise ValueError(f"grid needs at least one interval, got M={self.M}")

    @classmethod
    def from_step(cls, T: float, dt: float = 0.01) -> "TimeGrid":
        if dt <= 0:
            raise ValueError(f"time step must be positive, got {dt}")
        return cls(T=float(T), M=max(1, int(round(T / dt))))

    @property
    def dt(self) -> float:
        return self.T / self.M

    @property
    def nodes(self) -> np.ndarray:
        nodes = np.arange(self.M + 1) * self.dt
        nodes[-1] = self.T
        return nodes

    def locate(self, t: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Left node index and linear weight of the right node for times *t*."""
        t = np.clip(np.asarray(t, dtype=float), 0.0, self.T)
        k = np.minimum(np.floor(t / self.dt).astype(np.int64), self.M - 1)
        w = np.clip(t / self.dt - k, 0.0, 1.0)
        return k, w

    def nodes_between(self, start: float, end: float) -> np.ndarray:
        """Grid nodes strictly inside ``(start, end)``."""
        nodes = self.nodes
        return nodes[(nodes > start) & (nodes < end)]


@dataclass(frozen=True)
class OdeConfig:
    """Tolerances of the adaptive integrator.

    ``max_step`` defaults to the grid spacing and is never allowed to exceed it.
    """

    rtol: float = 1e-6
    atol: float = 1e-8
    max_step: Optional[float] = None
    method: str = "RK45"

    def __post_init__(self) -> None:
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError(f"tolerances must be positive, got rtol={self.rtol}, atol={self.atol}")
        if self.max_step is not None and self.max_step <= 0:
            raise ValueError(f"max_step must be positive, got {self.max_step}")


@dataclass(frozen=True)
class ValueField:
    """Values on ``grid x {0..d-1} x Sigma``; ``data`` has shape ``(M+1, d, S)``."""

    grid: TimeGrid
    data: np.ndarray

    def at_node(self, k: int) -> np.ndarray:
        return self.data[k]

    def value(self, k: int, x: int, mu_index: int) -> float:
        return float(self.data[k, x, mu_index])


class ControlField:
    """Nonnegative rate vectors on the grid, linear in time between nodes.

    :param grid: Time grid of the nodes.
    :param data: Array of shape ``(M+1, d, S, d-1)``.
    """

    def __init__(self, grid: TimeGrid, data: np.ndarray) -> None:
        data = np.asarray(data, dtype=float)
        if data.ndim != 4 or data.shape[0] != grid.M + 1:
            raise ValueError(
                f"control data must have shape (M+1, d, S, d-1) with M={grid.M}, got {data.shape}"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("control data must be finite")
        if np.any(data < 0):
            raise ValueError("control rates must be nonnegative")
        self.grid = grid
        self.data = data

    @classmethod
    def zeros(cls, grid: TimeGrid, space: JointSpace) -> "ControlField":
        return cls(grid, np.zeros((grid.M + 1, space.d, space.size, space.d - 1)))

    @classmethod
    def constant(cls, grid: TimeGrid, space: JointSpace, value: float) -> "ControlField":
        return cls(grid, np.full((grid.M + 1, space.d, space.size, space.d - 1), float(value)))

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    def at(self, t: float) -> np.ndarray:
        k, w = self.grid.locate(t)
        k, w = int(k), float(w)
        out = (1.0 - w) * self.data[k] + w * self.data[k + 1]
        return np.maximum(out, 0.0)

    def rates(self, t: float, x: int, mu_index: int) -> np.ndarray:
        k, w = self.grid.locate(t)
        k, w = int(k), float(w)
        out = (1.0 - w) * self.data[k, x, mu_index] + w * self.data[k + 1, x, mu_index]
        return np.maximum(out, 0.0)

    def rates_many(self, ts: np.ndarray, x: int, mu_index: int) -> np.ndarray:
        k, w = self.grid.locate(ts)
        series = self.data[:, x, mu_index]
        out = (1.0 - w)[:, None] * series[k] + w[:, None] * series[k + 1]
        return np.maximum(out, 0.0)

    def upper_bound(self) -> float:
        return float(self.data.max()) if self.data.size else 0.0

    def varies_in_time(self) -> bool:
        return bool(np.any(self.data != self.data[:1]))

    def mix(self, other: "ControlField", rho: float) -> "ControlField":
        """``rho * self + (1 - rho) * other`` on the nodes of ``self``."""
        if other.data.shape != self.data.shape:
            raise ValueError(f"cannot mix controls of shapes {self.data.shape} and {other.data.shape}")
        return ControlField(self.grid, rho * self.data + (1.0 - rho) * other.data)


def field_norm(data: np.ndarray, k: int) -> float:
    """``|psi(t_k)|_2``: Euclidean norm over every state (and rate slot) at node *k*."""
    return float(np.linalg.norm(np.asarray(data)[k].ravel()))


def sup_norm(data: np.ndarray) -> float:
    """``sup_k |psi(t_k)|_2`` over the grid nodes."""
    arr = np.asarray(data, dtype=float)
    if arr.size == 0:
        return 0.0
    per_node = np.sqrt(np.sum(arr.reshape(arr.shape[0], -1) ** 2, axis=1))
    return float(per_node.max())


class DirectSolution(NamedTuple):
    """Result of the direct solve.

    When the integration broke down, ``failed_at`` is the time it stopped,
    values below it are NaN and ``control`` is ``None``.
    """

    value: ValueField
    control: Optional[ControlField]
    unstable: bool
    failed_at: Optional[float] = None


def _check_compatible(model: GameModel, control: ControlField, grid: TimeGrid, name: str) -> None:
    expected = (model.d, model.space.size, model.d - 1)
    if control.data.shape[1:] != expected:
        raise ValueError(f"{name} has state shape {control.data.shape[1:]}, expected {expected}")
    if not np.isclose(control.grid.T, model.T) or not np.isclose(grid.T, model.T):
        raise ValueError(f"{name} grid horizon {control.grid.T} does not match model T={model.T}")


def _guard_finite(model: GameModel, t: float, values: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(values)):
        flat = int(np.flatnonzero(~np.isfinite(values.ravel()))[0])
        x, mu_index = model.space.split_index(flat)
        counts = model.space.counts(mu_index)
        raise SolverError(
            f"non-finite right-hand side at t={t:.6g} in state x={x}, counts={counts}",
            time=float(t),
            state=(x, counts),
        )
    return values


def _backward_fun(model: GameModel, rhs: Callable[[float, np.ndarray], np.ndarray]) -> Callable:
    d, S = model.d, model.space.size

    def fun(t: float, y: np.ndarray) -> np.ndarray:
        v = y.reshape(d, S)
        return -_guard_finite(model, t, rhs(t, v)).ravel()

    return fun


def _max_step(grid: TimeGrid, cfg: OdeConfig) -> float:
    return grid.dt if cfg.max_step is None else min(cfg.max_step, grid.dt)


def _integrate_backward(
    model: GameModel,
    rhs: Callable[[float, np.ndarray], np.ndarray],
    grid: TimeGrid,
    cfg: OdeConfig,
) -> ValueField:
    if not np.isclose(grid.T, model.T):
        raise ValueError(f"grid horizon {grid.T} does not match model T={model.T}")
    d, S = model.d, model.space.size
    terminal = np.array(model.tables.terminal, dtype=float)
    nodes = grid.nodes

    sol = solve_ivp(
        _backward_fun(model, rhs),
        (grid.T, 0.0),
        terminal.ravel(),
        method=cfg.method,
        t_eval=nodes[::-1],
        rtol=cfg.rtol,
        atol=cfg.atol,
        max_step=_max_step(grid, cfg),
    )
    if sol.status != 0 or sol.y.shape[1] != grid.M + 1:
        failed_at = float(sol.t[-1]) if sol.t.size else grid.T
        raise SolverError(f"integration failed at t={failed_at:.6g}: {sol.message}", time=failed_at)
    data = sol.y[:, ::-1].T.reshape(grid.M + 1, d, S).copy()
    data[-1] = terminal
    return ValueField(grid=grid, data=data)


def _integrate_prefix(
    model: GameModel,
    rhs: Callable[[float, np.ndarray], np.ndarray],
    grid: TimeGrid,
    cfg: OdeConfig,
) -> Tuple[ValueField, Optional[SolverError]]:
    """Integrate node to node from ``T`` and keep whatever was reached.

    Nodes below the failure stay NaN; the error is returned instead of raised.
    """
    d, S = model.d, model.space.size
    nodes = grid.nodes
    data = np.full((grid.M + 1, d, S), np.nan)
    data[-1] = model.tables.terminal
    fun = _backward_fun(model, rhs)
    y = data[-1].ravel()
    for k in range(grid.M, 0, -1):
        try:
            sol = solve_ivp(
                fun,
                (nodes[k], nodes[k - 1]),
                y,
                method=cfg.method,
                rtol=cfg.rtol,
                atol=cfg.atol,
                max_step=_max_step(grid, cfg),
            )
        except SolverError as exc:
            return ValueField(grid=grid, data=data), exc
        if sol.status != 0:
            failed_at = float(sol.t[-1])
            error = SolverError(f"integration failed at t={failed_at:.6g}: {sol.message}", time=failed_at)
            return ValueField(grid=grid, data=data), error
        y = sol.y[:, -1]
        data[k - 1] = y.reshape(d, S)
    return ValueField(grid=grid, data=data), None


def solve_hjb(
    model: GameModel,
    beta: ControlField,
    grid: TimeGrid,
    cfg: Optional[OdeConfig] = None,
) -> ValueField:
    """Value function of the tagged player when every other player uses *beta*."""
    cfg = cfg or OdeConfig()
    _check_compatible(model, beta, grid, "beta")

    def rhs(t: float, v: np.ndarray) -> np.ndarray:
        return model.hamiltonian_table(model.differences(v)) + model.population_term(v, beta.at(t))

    return _integrate_backward(model, rhs, grid, cfg)


def solve_nll_direct(
    model: GameModel,
    grid: TimeGrid,
    cfg: Optional[OdeConfig] = None,
) -> DirectSolution:
    """Integrate the coupled N-NLL system directly.

    The returned flag is raised when ``sup |v|`` exceeds ten times the a
    priori bound ``c_v``, or when the integration broke down; in the latter
    case the part reached from ``T`` is returned instead of an error.
    """
    cfg = cfg or OdeConfig()

    def rhs(t: float, v: np.ndarray) -> np.ndarray:
        p = model.differences(v)
        return model.hamiltonian_table(p) + model.population_term(v, model.minimizer_table(p))

    try:
        value = _integrate_backward(model, rhs, grid, cfg)
    except SolverError:
        value, error = _integrate_prefix(model, rhs, grid, cfg)
        if error is not None:
            logger.warning(
                "direct N-NLL solve broke down at t=%.6g (%s); earlier nodes are left as NaN",
                error.time if error.time is not None else float("nan"),
                error,
            )
            return DirectSolution(value=value, control=None, unstable=True, failed_at=error.time)
    control = ControlField(grid, model.minimizer_table(model.differences(value.data)))
    c_v, _ = model.compute_bounds()
    sup = float(np.max(np.abs(value.data)))
    unstable = sup > 10.0 * c_v
    if unstable:
        logger.warning(
            "direct N-NLL solve looks unstable: sup|v|=%.4g exceeds 10*c_v=%.4g", sup, 10.0 * c_v
        )
    return DirectSolution(value=value, control=control, unstable=unstable)


def evaluate_policy(
    model: GameModel,
    alpha: ControlField,
    beta: ControlField,
    grid: TimeGrid,
    cfg: Optional[OdeConfig] = None,
) -> ValueField:
    """Cost ``J(t, x, mu, alpha; beta)`` of a fixed tagged policy, no minimization."""
    cfg = cfg or OdeConfig()
    _check_compatible(model, alpha, grid, "alpha")
    _check_compatible(model, beta, grid, "beta")

    def rhs(t: float, k: np.ndarray) -> np.ndarray:
        a = alpha.at(t)
        return (
            model.running_table(a)
            + model.tagged_term(k, a)
            + model.population_term(k, beta.at(t))
        )

    return _integrate_backward(model, rhs, grid, cfg)


__all__ = [
    "ControlField",
    "DirectSolution",
    "OdeConfig",
    "SolverError",
    "TimeGrid",
    "ValueField",
    "evaluate_policy",
    "field_norm",
    "solve_hjb",
    "solve_nll_direct",
    "sup_norm",
]
