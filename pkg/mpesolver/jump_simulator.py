"""
Event-driven simulation of the pair ``(X_t, mu_t)``.

One exponential clock with the pooled rate
``Lambda = Lambda^tagged + sum_z Lambda^untagged_z`` drives every player.
At each event the actor is drawn from ``(Lambda^tagged, Lambda^untagged_1,
..., Lambda^untagged_d) / Lambda`` and the destination from the actor's
normalized rates. The clock modes are:

``frozen``
    rates are evaluated at the last event or control-grid node and held
    until the next one; running cost and compensator are charged with the
    same held action. Exact for controls that are constant in time, first
    order in the grid spacing otherwise.
``thinning``
    candidate times come from a constant majorant ``rate_cap`` and are
    accepted with probability ``Lambda(s) / rate_cap``. Exact for any
    time-varying control bounded by the majorant.
``auto`` (default)
    ``thinning`` when either control varies in time, ``frozen`` otherwise.

Under thinning the running cost along a holding interval is integrated with
the trapezoid rule on the interval's intersection with the control grid.
Each trajectory draws from its own stream ``SeedSequence(seed, spawn_key=(k,))``
so batches are reproducible under any split across worker threads.
"""

from __future__ import annotations

import asyncio
import logging
import math
import os
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import stats
from scipy.integrate import trapezoid

from .game_model import GameModel, destinations
from .ode_backend import SolverError, TimeGrid, ValueField
from .state_space import CountVector, validate_counts

logger = logging.getLogger(__name__)

FROZEN = "frozen"
THINNING = "thinning"
AUTO = "auto"
TAGGED = "tagged"
UNTAGGED = "untagged"


class Control(Protocol):
    """Anything that yields nonnegative rate vectors over time."""

    grid: TimeGrid

    def rates(self, t: float, x: int, mu_index: int) -> np.ndarray: ...

    def rates_many(self, ts: np.ndarray, x: int, mu_index: int) -> np.ndarray: ...

    def upper_bound(self) -> float: ...

    def varies_in_time(self) -> bool: ...


class Event(NamedTuple):
    time: float
    actor: str
    from_state: int
    to_state: int


class Segment(NamedTuple):
    """Holding interval ``[start, end)`` of the joint state ``(x, mu_index)``."""

    start: float
    end: float
    x: int
    mu_index: int


class TaggedJump(NamedTuple):
    """Tagged jump out of ``(x, mu_index)`` through rate ``slot``.

    ``rate_time`` is where the rates that drove the jump were evaluated: the
    start of the holding piece in frozen mode, the jump time itself under
    thinning. ``segment`` indexes the holding interval the jump ends.
    """

    time: float
    x: int
    mu_index: int
    slot: int
    rate_time: float
    segment: int = -1


class RateTotals(NamedTuple):
    tagged: float
    untagged: np.ndarray


@dataclass
class TrajectoryRecord:
    initial_x: int
    initial_counts: CountVector
    mode: str
    events: List[Event] = field(default_factory=list)
    segments: List[Segment] = field(default_factory=list)
    tagged_jumps: List[TaggedJump] = field(default_factory=list)
    segment_costs: List[float] = field(default_factory=list)
    running_cost: float = 0.0
    terminal_cost: float = 0.0
    loglik_terms: Tuple[float, float] = (0.0, 0.0)

    @property
    def cost(self) -> float:
        return self.running_cost + self.terminal_cost

    def costs_to_go(self) -> np.ndarray:
        """Cost incurred from the start of each segment until ``T``, terminal cost included."""
        tail = np.cumsum(np.asarray(self.segment_costs, dtype=float)[::-1])[::-1]
        return tail + self.terminal_cost

    def cost_to_go_at(self, times: np.ndarray) -> np.ndarray:
        """Cost from each of *times* to ``T``; running cost is split linearly within a segment."""
        times = np.asarray(times, dtype=float)
        if not self.segments:
            return np.full(times.shape, self.terminal_cost)
        starts = np.array([s.start for s in self.segments])
        ends = np.array([s.end for s in self.segments])
        which = np.clip(np.searchsorted(starts, times, side="right") - 1, 0, len(starts) - 1)
        span = ends[which] - starts[which]
        done = np.divide(
            times - starts[which], span, out=np.zeros_like(times), where=span > 0
        ).clip(0.0, 1.0)
        pieces = np.asarray(self.segment_costs, dtype=float)
        return self.costs_to_go()[which] - done * pieces[which]


# ------------------------------------------------------------- initial laws
@dataclass(frozen=True)
class Deterministic:
    """Tagged player in ``x0``, untagged players distributed as ``counts``."""

    x0: int
    counts: CountVector

    def sample(self, rng: np.random.Generator, d: int, N: int) -> Tuple[int, CountVector]:
        if not 0 <= self.x0 < d:
            raise ValueError(f"initial state {self.x0} out of range for d={d}")
        return self.x0, validate_counts(self.counts, d, N)

    def weights(self, model: GameModel) -> np.ndarray:
        x0, counts = self.sample(np.random.default_rng(0), model.d, model.N)
        out = np.zeros((model.d, model.space.size))
        out[x0, model.space.simplex.rank(counts)] = 1.0
        return out


@dataclass(frozen=True)
class IID:
    """All ``N+1`` players i.i.d. with law *probabilities*, one of them tagged."""

    probabilities: Tuple[float, ...]

    def __post_init__(self) -> None:
        p = np.asarray(self.probabilities, dtype=float)
        if np.any(p < 0) or not np.isclose(p.sum(), 1.0):
            raise ValueError(f"probabilities must be nonnegative and sum to 1, got {self.probabilities}")

    def _p(self, d: int) -> np.ndarray:
        p = np.asarray(self.probabilities, dtype=float)
        if p.shape != (d,):
            raise ValueError(f"expected {d} probabilities, got {len(self.probabilities)}")
        return p / p.sum()

    def sample(self, rng: np.random.Generator, d: int, N: int) -> Tuple[int, CountVector]:
        p = self._p(d)
        x0 = int(rng.choice(d, p=p))
        counts = tuple(int(c) for c in rng.multinomial(N, p))
        return x0, counts

    def weights(self, model: GameModel) -> np.ndarray:
        p = self._p(model.d)
        pmf = stats.multinomial.pmf(model.space.simplex.counts, model.N, p)
        return p[:, None] * np.asarray(pmf, dtype=float)[None, :]


InitialDistribution = Union[Deterministic, IID]


def theta_average(value: ValueField, theta0: InitialDistribution, model: GameModel) -> float:
    """``sum_{x, mu} theta0(x, mu) v(0, x, mu)``."""
    return float(np.sum(theta0.weights(model) * value.data[0]))


# ------------------------------------------------------------------ rates
def rate_vectors(
    model: GameModel, t: float, x: int, mu_index: int, alpha: Control, beta: Control
) -> Tuple[np.ndarray, np.ndarray]:
    """Tagged rate vector ``(d-1,)`` and untagged per-source rates ``(d, d-1)``.

    Row ``z`` of the untagged array already carries the multiplicity ``n_z``.
    """
    tagged = model.lambda0_at(x, mu_index) + model.lambda1_at(x, mu_index) * alpha.rates(t, x, mu_index)
    untagged = np.zeros((model.d, model.d - 1))
    occupancy = model.space.occupancy(mu_index)
    for z in range(model.d):
        n_z = int(occupancy[z])
        if n_z == 0:
            continue
        view = int(model.space.view_index[x, z, mu_index])
        per_player = model.lambda0_at(z, view) + model.lambda1_at(z, view) * beta.rates(t, z, view)
        untagged[z] = n_z * per_player
    if not (np.all(np.isfinite(tagged)) and np.all(np.isfinite(untagged))):
        raise SolverError(
            f"non-finite jump rate at t={t:.6g}, x={x}, counts={model.space.counts(mu_index)}",
            time=float(t),
            state=(x, model.space.counts(mu_index)),
        )
    return tagged, untagged


def total_rates(
    model: GameModel, t: float, x: int, mu: Sequence[int], alpha: Control, beta: Control
) -> RateTotals:
    """``Lambda^tagged`` and ``(Lambda^untagged_z)_z`` at ``(t, x, mu)``."""
    mu_index = model.space.simplex.rank(mu)
    tagged, untagged = rate_vectors(model, t, x, mu_index, alpha, beta)
    return RateTotals(tagged=float(tagged.sum()), untagged=untagged.sum(axis=1))


def default_rate_cap(model: GameModel, alpha: Control, beta: Control) -> float:
    """Majorant of the pooled rate over ``[0, T]`` and the whole state space."""
    tab = model.tables
    lam0 = float(tab.lam0.max()) if tab.lam0.size else 0.0
    lam1 = float(tab.lam1.max()) if tab.lam1.size else 0.0
    k = model.d - 1
    tagged = k * (lam0 + lam1 * alpha.upper_bound())
    untagged = model.N * k * (lam0 + lam1 * beta.upper_bound())
    return tagged + untagged


def varies_in_time(control: Control) -> bool:
    check = getattr(control, "varies_in_time", None)
    return True if check is None else bool(check())


def resolve_mode(mode: str, alpha: Control, beta: Control) -> str:
    """Concrete clock for *mode*; ``auto`` picks thinning for time-varying controls."""
    if mode == AUTO:
        return THINNING if varies_in_time(alpha) or varies_in_time(beta) else FROZEN
    if mode not in (FROZEN, THINNING):
        raise ValueError(
            f"unknown simulation mode {mode!r}; use {AUTO!r}, {FROZEN!r} or {THINNING!r}"
        )
    return mode


def segment_nodes(grid: TimeGrid, start: float, end: float) -> np.ndarray:
    """Quadrature points of ``[start, end]``: both ends plus inner grid nodes."""
    return np.concatenate(([start], grid.nodes_between(start, end), [end]))


def frozen_breaks(alpha: Control, beta: Control, T: float) -> np.ndarray:
    """Times in ``(0, T]`` where frozen rates are re-evaluated: every node of either grid."""
    nodes = np.union1d(alpha.grid.nodes, beta.grid.nodes)
    return np.append(nodes[(nodes > 0) & (nodes < T)], T)


def _draw(rng: np.random.Generator, weights: np.ndarray) -> int:
    weights = np.asarray(weights, dtype=float)
    return int(rng.choice(weights.size, p=weights / weights.sum()))


# ------------------------------------------------------------- trajectory
class _Path:
    """Mutable state of one trajectory under construction."""

    def __init__(self, model: GameModel, alpha: Control, x0: int, counts: CountVector, mode: str) -> None:
        self.model = model
        self.alpha = alpha
        self.x = x0
        self.mu_index = model.space.simplex.rank(counts)
        self.record = TrajectoryRecord(initial_x=x0, initial_counts=counts, mode=mode)
        self.log_sum = 0.0
        self.compensator = 0.0

    def hold(self, start: float, end: float, frozen: bool = False) -> None:
        """Charge ``[start, end)`` in the current state.

        With *frozen* the action at *start* is held over the whole interval,
        matching the rates the clock used.
        """
        model, x, i = self.model, self.x, self.mu_index
        self.record.segments.append(Segment(start, end, x, i))
        if end <= start:
            self.record.segment_costs.append(0.0)
            return
        pts = np.array([start]) if frozen else segment_nodes(self.alpha.grid, start, end)
        actions = self.alpha.rates_many(pts, x, i)
        running = np.asarray(model.cost.running(x, model.space.counts(i), actions), dtype=float)
        tagged = model.lambda0_at(x, i).sum() + actions @ model.lambda1_at(x, i)
        if frozen:
            piece = float(running[0]) * (end - start)
            self.compensator += float(tagged[0]) * (end - start)
        else:
            piece = float(trapezoid(running, pts))
            self.compensator += float(trapezoid(tagged, pts))
        self.record.segment_costs.append(piece)
        self.record.running_cost += piece

    def fire(
        self,
        rng: np.random.Generator,
        t: float,
        tagged: np.ndarray,
        untagged: np.ndarray,
        rate_time: float,
    ) -> None:
        actors = np.concatenate(([tagged.sum()], untagged.sum(axis=1)))
        k = _draw(rng, actors)
        if k == 0:
            slot = _draw(rng, tagged)
            y = destinations(self.model.d, self.x)[slot]
            self.record.tagged_jumps.append(
                TaggedJump(t, self.x, self.mu_index, slot, rate_time, len(self.record.segments) - 1)
            )
            self.record.events.append(Event(t, TAGGED, self.x, y))
            self.log_sum += math.log(tagged[slot])
            self.x = y
            return
        z = k - 1
        slot = _draw(rng, untagged[z])
        y = destinations(self.model.d, z)[slot]
        self.record.events.append(Event(t, UNTAGGED, z, y))
        self.mu_index = int(self.model.space.move_index[z, y, self.mu_index])

    def finish(self) -> TrajectoryRecord:
        self.record.terminal_cost = self.model.terminal_at(self.x, self.mu_index)
        self.record.loglik_terms = (self.log_sum, self.compensator)
        return self.record


def simulate_trajectory(
    model: GameModel,
    alpha: Control,
    beta: Control,
    init: Tuple[int, Sequence[int]],
    rng: np.random.Generator,
    *,
    mode: str = AUTO,
    rate_cap: Optional[float] = None,
) -> TrajectoryRecord:
    """Simulate one path on ``[0, T]`` from ``init = (x0, counts0)``."""
    x0, counts = init
    counts = validate_counts(counts, model.d, model.N)
    if not 0 <= x0 < model.d:
        raise ValueError(f"initial state {x0} out of range for d={model.d}")
    mode = resolve_mode(mode, alpha, beta)
    path = _Path(model, alpha, int(x0), counts, mode)
    T = model.T
    if mode == FROZEN:
        breaks = frozen_breaks(alpha, beta, T)
        t = 0.0
        while t < T:
            until = float(breaks[np.searchsorted(breaks, t, side="right")])
            tagged, untagged = rate_vectors(model, t, path.x, path.mu_index, alpha, beta)
            total = float(tagged.sum() + untagged.sum())
            tau = rng.exponential(1.0 / total) if total > 0 else math.inf
            if t + tau >= until:
                path.hold(t, until, frozen=True)
                t = until
                continue
            path.hold(t, t + tau, frozen=True)
            rate_time = t
            t += tau
            path.fire(rng, t, tagged, untagged, rate_time)
    else:
        cap = default_rate_cap(model, alpha, beta) if rate_cap is None else float(rate_cap)
        if cap < 0 or not math.isfinite(cap):
            raise ValueError(f"rate_cap must be finite and nonnegative, got {cap}")
        t = seg_start = 0.0
        while True:
            tau = rng.exponential(1.0 / cap) if cap > 0 else math.inf
            if t + tau >= T:
                path.hold(seg_start, T)
                break
            t += tau
            tagged, untagged = rate_vectors(model, t, path.x, path.mu_index, alpha, beta)
            total = float(tagged.sum() + untagged.sum())
            if total > cap * (1.0 + 1e-9):
                raise SolverError(f"pooled rate {total:.6g} exceeds rate_cap {cap:.6g} at t={t:.6g}", time=t)
            if rng.random() * cap >= total:
                continue
            path.hold(seg_start, t)
            path.fire(rng, t, tagged, untagged, t)
            seg_start = t
    return path.finish()


# ------------------------------------------------------------------ batches
def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def batch_clock(
    model: GameModel, alpha: Control, beta: Control, mode: str, rate_cap: Optional[float]
) -> Tuple[str, Optional[float]]:
    """Resolve the clock once for a whole batch, majorant included."""
    mode = resolve_mode(mode, alpha, beta)
    if mode == THINNING and rate_cap is None:
        rate_cap = default_rate_cap(model, alpha, beta)
    return mode, rate_cap


def simulate_batch(
    model: GameModel,
    alpha: Control,
    beta: Control,
    theta0: InitialDistribution,
    M: int,
    seed: int,
    *,
    start: int = 0,
    mode: str = AUTO,
    rate_cap: Optional[float] = None,
) -> List[TrajectoryRecord]:
    """Trajectories ``start .. start+M-1`` in index order."""
    mode, rate_cap = batch_clock(model, alpha, beta, mode, rate_cap)
    records = []
    for k in range(start, start + M):
        rng = trajectory_rng(seed, k)
        init = theta0.sample(rng, model.d, model.N)
        records.append(simulate_trajectory(model, alpha, beta, init, rng, mode=mode, rate_cap=rate_cap))
    return records


async def simulate_batch_async(
    model: GameModel,
    alpha: Control,
    beta: Control,
    theta0: InitialDistribution,
    M: int,
    seed: int,
    *,
    threads: Optional[int] = None,
    mode: str = AUTO,
    rate_cap: Optional[float] = None,
) -> List[TrajectoryRecord]:
    """Fan :func:`simulate_batch` out over worker threads; output order is by index."""
    threads = max(1, threads or os.cpu_count() or 1)
    chunk = max(1, math.ceil(M / threads))
    semaphore = asyncio.Semaphore(threads)
    mode, rate_cap = batch_clock(model, alpha, beta, mode, rate_cap)

    async def run(start: int, size: int) -> List[TrajectoryRecord]:
        async with semaphore:
            return await asyncio.to_thread(
                simulate_batch,
                model, alpha, beta, theta0, size, seed,
                start=start, mode=mode, rate_cap=rate_cap,
            )

    parts = await asyncio.gather(*(run(s, min(chunk, M - s)) for s in range(0, M, chunk)))
    return [record for part in parts for record in part]


def run_batch(
    model: GameModel,
    alpha: Control,
    beta: Control,
    theta0: InitialDistribution,
    M: int,
    seed: int,
    *,
    threads: int = 1,
    mode: str = AUTO,
    rate_cap: Optional[float] = None,
) -> List[TrajectoryRecord]:
    """Sequential for ``threads == 1``, threaded otherwise; identical output either way."""
    if threads <= 1:
        return simulate_batch(model, alpha, beta, theta0, M, seed, mode=mode, rate_cap=rate_cap)
    return asyncio.run(
        simulate_batch_async(
            model, alpha, beta, theta0, M, seed, threads=threads, mode=mode, rate_cap=rate_cap
        )
    )


class CostEstimate(NamedTuple):
    mean: float
    stderr: float
    breakdown: pd.DataFrame


def summarize_costs(records: Sequence[TrajectoryRecord], model: GameModel) -> CostEstimate:
    if len(records) < 2:
        raise ValueError(f"need at least 2 trajectories, got {len(records)}")
    costs = np.array([r.cost for r in records], dtype=float)
    if not np.all(np.isfinite(costs)):
        raise SolverError("non-finite trajectory cost")
    mean = float(costs.mean())
    stderr = float(costs.std(ddof=1) / math.sqrt(costs.size))
    frame = pd.DataFrame(
        {"x0": [model.state_labels[r.initial_x] for r in records], "cost": costs}
    )
    breakdown = (
        frame.groupby("x0", sort=True)["cost"]
        .agg(["count", "mean", "std"])
        .reset_index()
    )
    return CostEstimate(mean=mean, stderr=stderr, breakdown=breakdown)


def estimate_cost(
    model: GameModel,
    alpha: Control,
    beta: Control,
    theta0: InitialDistribution,
    M: int,
    seed: int,
    *,
    threads: int = 1,
    mode: str = AUTO,
    rate_cap: Optional[float] = None,
) -> CostEstimate:
    """Monte Carlo mean and standard error of the tagged player's cost under *theta0*."""
    if M < 2:
        raise ValueError(f"need at least 2 trajectories, got M={M}")
    records = run_batch(
        model, alpha, beta, theta0, M, seed, threads=threads, mode=mode, rate_cap=rate_cap
    )
    return summarize_costs(records, model)


# ---------------------------------------------------------------- outputs
def empirical_distribution_path(
    record: TrajectoryRecord, model: GameModel, times: Sequence[float]
) -> np.ndarray:
    """Fractions of all ``N+1`` players per state at each of *times*; ``(len(times), d)``."""
    starts = np.array([s.start for s in record.segments])
    ts = np.clip(np.asarray(times, dtype=float), 0.0, model.T)
    which = np.clip(np.searchsorted(starts, ts, side="right") - 1, 0, len(starts) - 1)
    out = np.empty((ts.size, model.d))
    for row, k in enumerate(which):
        seg = record.segments[int(k)]
        counts = np.array(model.space.occupancy(seg.mu_index), dtype=float)
        counts[seg.x] += 1.0
        out[row] = counts / (model.N + 1)
    return out


def distribution_bands(
    records: Sequence[TrajectoryRecord], model: GameModel, times: Sequence[float]
) -> pd.DataFrame:
    """Mean and standard deviation across *records* of the per-state fractions."""
    paths = np.stack([empirical_distribution_path(r, model, times) for r in records])
    mean = paths.mean(axis=0)
    std = paths.std(axis=0, ddof=1) if len(records) > 1 else np.zeros_like(mean)
    rows = []
    for k, t in enumerate(times):
        for x in range(model.d):
            rows.append((float(t), model.state_labels[x], float(mean[k, x]), float(std[k, x])))
    return pd.DataFrame(rows, columns=["t", "state", "mean", "std"])


def trajectories_frame(records: Sequence[TrajectoryRecord], model: GameModel) -> pd.DataFrame:
    labels = model.state_labels
    rows = [
        (k, ev.time, ev.actor, labels[ev.from_state], labels[ev.to_state])
        for k, record in enumerate(records)
        for ev in record.events
    ]
    return pd.DataFrame(rows, columns=["traj_id", "event_time", "actor", "from", "to"])


def costs_frame(records: Sequence[TrajectoryRecord]) -> pd.DataFrame:
    return pd.DataFrame(
        {"traj_id": range(len(records)), "cost": [r.cost for r in records]},
        columns=["traj_id", "cost"],
    )


__all__ = [
    "AUTO",
    "CostEstimate",
    "Deterministic",
    "Event",
    "FROZEN",
    "IID",
    "RateTotals",
    "Segment",
    "TaggedJump",
    "THINNING",
    "TrajectoryRecord",
    "batch_clock",
    "costs_frame",
    "default_rate_cap",
    "distribution_bands",
    "empirical_distribution_path",
    "estimate_cost",
    "frozen_breaks",
    "rate_vectors",
    "resolve_mode",
    "run_batch",
    "segment_nodes",
    "simulate_batch",
    "simulate_batch_async",
    "simulate_trajectory",
    "summarize_costs",
    "theta_average",
    "total_rates",
    "trajectories_frame",
    "trajectory_rng",
    "varies_in_time",
]
