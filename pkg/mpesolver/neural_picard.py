"""
Neural (weighted) Picard iteration.

Each best response is a small feedforward network trained by simulation:
trajectories are drawn with the pooled jump simulator, and the gradient of
the expected cost is estimated with the score-function identity

    grad J = E[ grad(pathwise running cost) + (cost - baseline) * grad log L ],

where ``log L`` is the log-likelihood of the tagged player's jumps (sum of
log jump rates minus the integrated total tagged rate). Each likelihood term
is weighted by the cost still to come from the start of its holding interval
instead of the whole cost, and the baseline is a curve in time.
Differentiating through jump times is never attempted.

The untagged control ``beta_hat^(n) = rho beta_hat^(n-1) + (1-rho) alpha_hat^(n)``
is kept exactly as a convex combination of the trained networks
(:class:`MixedControl`) with rational weights.

Networks are evaluated on a quadrature time grid and interpolated linearly
in between (:class:`NetControl`), so the simulator and the gradient see the
same control. ``torch`` is an optional dependency (``pip install
mpesolver[neural]``); building any network without it raises ``ImportError``.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

try:
    # torch is an optional dependency
    import torch
    from torch import nn
except ImportError:  # pragma: no cover
    torch = None  # type: ignore
    nn = None  # type: ignore

from .game_model import GameModel
from .jump_simulator import (
    AUTO,
    FROZEN,
    InitialDistribution,
    TrajectoryRecord,
    run_batch,
    segment_nodes,
)
from .ode_backend import ControlField, SolverError, TimeGrid

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mpesolver.mixed-control"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(SolverError):
    """The training loss stayed far above its starting value for too long."""


def _require_torch() -> None:
    if torch is None:
        raise ImportError(
            "torch is required for neural Picard iterations. "
            "Install it with 'pip install mpesolver[neural]'."
        )


def encode(model: GameModel, ts: np.ndarray, x: int, counts: Sequence[int]) -> np.ndarray:
    """Network input rows ``[t/T, onehot(x), counts/N]`` of width ``2d+1``."""
    ts = np.atleast_1d(np.asarray(ts, dtype=float))
    onehot = np.zeros(model.d)
    onehot[x] = 1.0
    fixed = np.concatenate((onehot, np.asarray(counts, dtype=float) / model.N))
    return np.column_stack((ts / model.T, np.broadcast_to(fixed, (ts.size, fixed.size))))


class ControlNet:
    """Feedforward rate network with a softplus output layer.

    :param d: Number of states; the output has ``d-1`` rates.
    :param hidden_layers: Number of hidden ``tanh`` layers.
    :param width: Units per hidden layer.
    :param seed: Seed of the parameter initialization.
    :param zero_output: Zero the last layer so every output is ``ln 2``.
    """

    def __init__(
        self,
        d: int,
        *,
        hidden_layers: int = 2,
        width: int = 64,
        seed: int = 0,
        zero_output: bool = False,
    ) -> None:
        _require_torch()
        if hidden_layers < 1 or width < 1:
            raise ValueError(f"need at least one hidden layer of positive width, got {hidden_layers}x{width}")
        self.d = d
        self.hidden_layers = hidden_layers
        self.width = width
        layers: List[Any] = []
        fan_in = 2 * d + 1
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            for _ in range(hidden_layers):
                layers += [nn.Linear(fan_in, width, dtype=torch.float64), nn.Tanh()]
                fan_in = width
            last = nn.Linear(fan_in, d - 1, dtype=torch.float64)
            layers += [last, nn.Softplus()]
        self.network = nn.Sequential(*layers)
        if zero_output:
            with torch.no_grad():
                last.weight.zero_()
                last.bias.zero_()

    def __call__(self, features: "torch.Tensor") -> "torch.Tensor":
        return self.network(features)

    def parameters(self) -> List["torch.Tensor"]:
        return list(self.network.parameters())

    def clone(self) -> "ControlNet":
        return copy.deepcopy(self)

    def linear_layers(self) -> List["nn.Linear"]:
        return [m for m in self.network if isinstance(m, nn.Linear)]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "hidden_layers": self.hidden_layers,
            "width": self.width,
            "layers": [
                {"weight": layer.weight.detach().tolist(), "bias": layer.bias.detach().tolist()}
                for layer in self.linear_layers()
            ],
        }

    @classmethod
    def from_dict(cls, d: int, payload: Dict[str, Any]) -> "ControlNet":
        net = cls(d, hidden_layers=int(payload["hidden_layers"]), width=int(payload["width"]))
        layers = net.linear_layers()
        if len(payload["layers"]) != len(layers):
            raise ValueError("checkpoint layer count does not match the network shape")
        with torch.no_grad():
            for layer, data in zip(layers, payload["layers"]):
                weight = torch.tensor(data["weight"], dtype=torch.float64)
                bias = torch.tensor(data["bias"], dtype=torch.float64)
                if weight.shape != layer.weight.shape or bias.shape != layer.bias.shape:
                    raise ValueError("checkpoint parameter shape does not match the network")
                layer.weight.copy_(weight)
                layer.bias.copy_(bias)
        return net


def net_eval(net: ControlNet, model: GameModel, t: float, x: int, mu: Sequence[int]) -> np.ndarray:
    """Rates of *net* at ``(t, x, mu)``; strictly positive."""
    _require_torch()
    with torch.no_grad():
        features = torch.as_tensor(encode(model, np.array([t]), x, mu))
        return net(features)[0].numpy().copy()


class MixedControl:
    """Convex combination ``sum_k w_k net_k`` with exact rational weights."""

    def __init__(self, components: Iterable[Tuple[Fraction, ControlNet]]) -> None:
        self.components = [(Fraction(w), net) for w, net in components]
        if not self.components:
            raise ValueError("a mixed control needs at least one network")
        if any(w < 0 for w, _ in self.components):
            raise ValueError("mixing weights must be nonnegative")
        if sum(w for w, _ in self.components) != 1:
            raise ValueError("mixing weights must sum to 1")

    @classmethod
    def single(cls, net: ControlNet) -> "MixedControl":
        return cls([(Fraction(1), net)])

    @property
    def weights(self) -> List[Fraction]:
        return [w for w, _ in self.components]

    def mix(self, net: ControlNet, rho: Union[float, Fraction]) -> "MixedControl":
        """``rho * self + (1 - rho) * net``."""
        rho = rho if isinstance(rho, Fraction) else Fraction(str(rho))
        if not 0 <= rho < 1:
            raise ValueError(f"rho must lie in [0, 1), got {rho}")
        kept = [(rho * w, n) for w, n in self.components if rho * w > 0]
        return MixedControl(kept + [(1 - rho, net)])

    def __call__(self, features: "torch.Tensor") -> "torch.Tensor":
        out = None
        for w, net in self.components:
            term = float(w) * net(features)
            out = term if out is None else out + term
        return out


Policy = Union[ControlNet, MixedControl]


class NetControl:
    """A network policy seen as a control on ``quad_grid``.

    Rates at the grid nodes are computed once per visited state and
    interpolated linearly in time, exactly like :class:`ControlField`.
    """

    def __init__(self, policy: Policy, model: GameModel, quad_grid: TimeGrid) -> None:
        _require_torch()
        self.policy = policy
        self.model = model
        self.grid = quad_grid
        self._cache: Dict[Tuple[int, int], np.ndarray] = {}
        self._bound: Optional[float] = None

    def table(self, x: int, mu_index: int) -> np.ndarray:
        key = (x, mu_index)
        cached = self._cache.get(key)
        if cached is None:
            features = encode(self.model, self.grid.nodes, x, self.model.space.counts(mu_index))
            with torch.no_grad():
                cached = self.policy(torch.as_tensor(features)).numpy().copy()
            self._cache[key] = cached
        return cached

    def rates(self, t: float, x: int, mu_index: int) -> np.ndarray:
        k, w = self.grid.locate(t)
        k, w = int(k), float(w)
        tab = self.table(x, mu_index)
        return np.maximum((1.0 - w) * tab[k] + w * tab[k + 1], 0.0)

    def rates_many(self, ts: np.ndarray, x: int, mu_index: int) -> np.ndarray:
        k, w = self.grid.locate(ts)
        tab = self.table(x, mu_index)
        return np.maximum((1.0 - w)[:, None] * tab[k] + w[:, None] * tab[k + 1], 0.0)

    def to_field(self, chunk: int = 256) -> ControlField:
        """Tabulate every state on ``quad_grid``."""
        model = self.model
        nodes = self.grid.nodes
        data = np.empty((nodes.size, model.d, model.space.size, model.d - 1))
        for x in range(model.d):
            for lo in range(0, model.space.size, chunk):
                hi = min(lo + chunk, model.space.size)
                rows = np.concatenate(
                    [encode(model, nodes, x, model.space.counts(i)) for i in range(lo, hi)]
                )
                with torch.no_grad():
                    out = self.policy(torch.as_tensor(rows)).numpy()
                data[:, x, lo:hi] = out.reshape(hi - lo, nodes.size, model.d - 1).transpose(1, 0, 2)
        return ControlField(self.grid, data)

    def upper_bound(self) -> float:
        """Largest rate over every state and node; tabulated once per control."""
        if self._bound is None:
            self._bound = self.to_field().upper_bound()
        return self._bound

    def varies_in_time(self) -> bool:
        return True


# ------------------------------------------------------------------ training
@dataclass
class TrainConfig:
    epochs: int = 200
    batch: int = 256
    lr: float = 3e-3
    betas: Tuple[float, float] = (0.9, 0.999)
    baseline: str = "moving_average"
    baseline_decay: float = 0.9
    seed: int = 0
    hidden_layers: int = 2
    width: int = 64
    quad_M: int = 100
    mode: str = AUTO
    rate_cap: Optional[float] = None
    threads: int = 1
    log_every: int = 10
    divergence_factor: float = 10.0
    divergence_patience: int = 50

    def __post_init__(self) -> None:
        if self.epochs < 1 or self.batch < 2 or self.lr <= 0:
            raise ValueError(
                f"epochs, batch and lr must be positive (batch >= 2), got "
                f"{self.epochs}, {self.batch}, {self.lr}"
            )
        if self.baseline not in ("moving_average", "batch_mean", "none"):
            raise ValueError(f"unknown baseline mode {self.baseline!r}")
        if self.quad_M < 1:
            raise ValueError(f"quad_M must be at least 1, got {self.quad_M}")


class LossRecord(NamedTuple):
    iteration: int
    epoch: int
    loss: float


class TrainingResult(NamedTuple):
    net: ControlNet
    losses: List[LossRecord]


Baseline = Union[float, np.ndarray]


def baseline_curve(records: Sequence[TrajectoryRecord], quad_grid: TimeGrid) -> np.ndarray:
    """Batch mean of the cost-to-go at every node of *quad_grid*."""
    if not records:
        raise ValueError("cannot build a baseline from an empty batch")
    nodes = quad_grid.nodes
    return np.mean([r.cost_to_go_at(nodes) for r in records], axis=0)


def _baseline_nodes(baseline: Baseline, quad_grid: TimeGrid) -> np.ndarray:
    values = np.asarray(baseline, dtype=float)
    if values.ndim == 0:
        return np.full(quad_grid.M + 1, float(values))
    if values.shape != (quad_grid.M + 1,):
        raise ValueError(f"baseline must be a scalar or have {quad_grid.M + 1} node values, got {values.shape}")
    return values


class _Points:
    """Flat quadrature and jump data of a batch, grouped by visited state.

    Every likelihood term of a holding interval is weighted by the cost still
    to come from the start of that interval, minus the baseline there.
    Frozen records are charged with the action held from the interval start.
    """

    def __init__(self, records: Sequence[TrajectoryRecord], grid: TimeGrid, baseline: np.ndarray) -> None:
        nodes = grid.nodes
        states: Dict[Tuple[int, int], int] = {}
        q_state, q_k, q_w, q_weight, q_traj = [], [], [], [], []
        c_state, c_k, c_w, c_weight, c_score = [], [], [], [], []
        j_state, j_k, j_w, j_slot, j_score = [], [], [], [], []
        for traj, record in enumerate(records):
            to_go = record.costs_to_go()
            scores = to_go - np.interp([s.start for s in record.segments], nodes, baseline)
            frozen = record.mode == FROZEN
            for n, seg in enumerate(record.segments):
                v = states.setdefault((seg.x, seg.mu_index), len(states))
                if seg.end <= seg.start:
                    continue
                if frozen:
                    pts = np.array([seg.start])
                    weights = np.array([seg.end - seg.start])
                else:
                    pts = segment_nodes(grid, seg.start, seg.end)
                    weights = _trapezoid_weights(pts)
                k, w = grid.locate(pts)
                q_state += [v] * pts.size
                q_k += list(k)
                q_w += list(w)
                q_weight += list(weights)
                q_traj += [traj] * pts.size
                c_state += [v] * pts.size
                c_k += list(k)
                c_w += list(w)
                c_weight += list(weights)
                c_score += [scores[n]] * pts.size
            for jump in record.tagged_jumps:
                v = states.setdefault((jump.x, jump.mu_index), len(states))
                k, w = grid.locate(jump.rate_time)
                j_state.append(v)
                j_k.append(int(k))
                j_w.append(float(w))
                j_slot.append(jump.slot)
                j_score.append(scores[jump.segment])
        self.states = sorted(states, key=states.get)
        self.quad = (_ints(q_state), _ints(q_k), _floats(q_w), _floats(q_weight), _ints(q_traj))
        self.comp = (_ints(c_state), _ints(c_k), _floats(c_w), _floats(c_weight), _floats(c_score))
        self.jumps = (_ints(j_state), _ints(j_k), _floats(j_w), _ints(j_slot), _floats(j_score))


def _ints(seq: Sequence[Any]) -> np.ndarray:
    return np.asarray(seq, dtype=np.int64)


def _floats(seq: Sequence[Any]) -> np.ndarray:
    return np.asarray(seq, dtype=float)


def _trapezoid_weights(pts: np.ndarray) -> np.ndarray:
    gaps = np.diff(pts)
    weights = np.zeros(pts.size)
    weights[:-1] += 0.5 * gaps
    weights[1:] += 0.5 * gaps
    return weights


def surrogate_loss(
    records: Sequence[TrajectoryRecord],
    net: ControlNet,
    model: GameModel,
    quad_grid: TimeGrid,
    baseline: Baseline = 0.0,
) -> "torch.Tensor":
    """Differentiable batch loss whose gradient is the score-function estimator.

    *baseline* is a constant or a curve on the nodes of *quad_grid*.
    """
    _require_torch()
    if not records:
        raise ValueError("cannot build a loss from an empty batch")
    points = _Points(records, quad_grid, _baseline_nodes(baseline, quad_grid))
    nodes = quad_grid.nodes
    features = np.concatenate(
        [encode(model, nodes, x, model.space.counts(i)) for x, i in points.states]
    )
    table = net(torch.as_tensor(features)).reshape(len(points.states), nodes.size, model.d - 1)
    lam0 = torch.as_tensor(np.stack([model.lambda0_at(x, i) for x, i in points.states]))
    lam1 = torch.as_tensor(np.stack([model.lambda1_at(x, i) for x, i in points.states]))
    batch = len(records)

    def actions(state: np.ndarray, k: np.ndarray, w: np.ndarray) -> "torch.Tensor":
        s, kk = torch.as_tensor(state), torch.as_tensor(k)
        wt = torch.as_tensor(w)[:, None]
        return (1.0 - wt) * table[s, kk] + wt * table[s, kk + 1]

    # pathwise running cost
    state, k, w, weight, traj = points.quad
    running = torch.zeros(batch, dtype=torch.float64)
    if state.size:
        a = actions(state, k, w)
        values = torch.empty(state.size, dtype=torch.float64)
        for v, (x, i) in enumerate(points.states):
            mask = state == v
            if mask.any():
                idx = torch.as_tensor(np.flatnonzero(mask))
                values = values.index_put(
                    (idx,), torch.as_tensor(model.cost.running(x, model.space.counts(i), a[idx]))
                )
        running = running.index_add(0, torch.as_tensor(traj), torch.as_tensor(weight) * values)

    # score terms: compensator and jump log-rates
    score = torch.zeros((), dtype=torch.float64)
    state, k, w, weight, factor = points.comp
    if state.size:
        s = torch.as_tensor(state)
        rate = lam0[s].sum(-1) + (lam1[s] * actions(state, k, w)).sum(-1)
        score = score - (torch.as_tensor(factor * weight) * rate).sum()
    state, k, w, slot, factor = points.jumps
    if state.size:
        s, sl = torch.as_tensor(state), torch.as_tensor(slot)
        a = actions(state, k, w)
        rate = lam0[s, sl] + lam1[s, sl] * a[torch.arange(state.size), sl]
        score = score + (torch.as_tensor(factor) * torch.log(rate)).sum()

    return running.mean() + score / batch


def policy_gradient(
    records: Sequence[TrajectoryRecord],
    net: ControlNet,
    model: GameModel,
    quad_grid: TimeGrid,
    baseline: Baseline = 0.0,
) -> np.ndarray:
    """Score-function gradient estimate, flattened in parameter order."""
    loss = surrogate_loss(records, net, model, quad_grid, baseline)
    grads = torch.autograd.grad(loss, net.parameters(), allow_unused=True)
    flat = [
        (g if g is not None else torch.zeros_like(p)).reshape(-1)
        for g, p in zip(grads, net.parameters())
    ]
    return torch.cat(flat).detach().numpy()


def _derived_seed(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def train_best_response(
    model: GameModel,
    beta: Policy,
    cfg: TrainConfig,
    theta0: InitialDistribution,
    *,
    iteration: int = 1,
    init: Optional[ControlNet] = None,
) -> TrainingResult:
    """Fit ``alpha_hat^(n)`` against the fixed untagged policy *beta*."""
    _require_torch()
    quad = TimeGrid(model.T, cfg.quad_M)
    if init is not None:
        net = init.clone()
    else:
        net = ControlNet(
            model.d,
            hidden_layers=cfg.hidden_layers,
            width=cfg.width,
            seed=_derived_seed(cfg.seed, iteration),
        )
    beta_control = NetControl(beta, model, quad)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=cfg.betas)
    losses: List[LossRecord] = []
    average: Optional[np.ndarray] = None
    initial: Optional[float] = None
    strikes = 0
    for epoch in range(cfg.epochs):
        alpha_control = NetControl(net, model, quad)
        records = run_batch(
            model, alpha_control, beta_control, theta0, cfg.batch,
            _derived_seed(cfg.seed, iteration, epoch),
            threads=cfg.threads, mode=cfg.mode, rate_cap=cfg.rate_cap,
        )
        batch_mean = float(np.mean([r.cost for r in records]))
        curve = baseline_curve(records, quad)
        baseline: Baseline
        if cfg.baseline == "moving_average":
            baseline = curve if average is None else average
        elif cfg.baseline == "batch_mean":
            baseline = curve
        else:
            baseline = 0.0
        average = curve if average is None else cfg.baseline_decay * average + (1 - cfg.baseline_decay) * curve

        optimizer.zero_grad()
        loss = surrogate_loss(records, net, model, quad, baseline)
        loss.backward()
        optimizer.step()

        losses.append(LossRecord(iteration, epoch, batch_mean))
        if cfg.log_every and epoch % cfg.log_every == 0:
            logger.info("iteration %d epoch %d: estimated cost %.5f", iteration, epoch, batch_mean)
        if initial is None:
            initial = batch_mean
        if initial > 0 and batch_mean > cfg.divergence_factor * initial:
            strikes += 1
            if strikes >= cfg.divergence_patience:
                raise TrainingDivergedError(
                    f"training diverged in iteration {iteration}: cost {batch_mean:.4g} "
                    f"above {cfg.divergence_factor:g}x its initial value for {strikes} epochs"
                )
        else:
            strikes = 0
    return TrainingResult(net=net, losses=losses)


class NeuralPicardResult(NamedTuple):
    control: MixedControl
    best_responses: List[ControlNet]
    losses: List[LossRecord]


def initial_policy(model: GameModel, cfg: TrainConfig) -> MixedControl:
    """``beta_hat^(0)``: the constant rate ``ln 2`` everywhere."""
    return MixedControl.single(
        ControlNet(model.d, hidden_layers=cfg.hidden_layers, width=cfg.width, seed=cfg.seed, zero_output=True)
    )


def neural_picard_run(
    model: GameModel,
    theta0: InitialDistribution,
    n_iter: int,
    rho: float,
    cfg: TrainConfig,
    *,
    initial: Optional[MixedControl] = None,
) -> NeuralPicardResult:
    """Alternate simulated best-response training and weighted mixing ``n_iter`` times."""
    if n_iter < 0:
        raise ValueError(f"n_iter must be nonnegative, got {n_iter}")
    if not 0.0 <= rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    control = initial if initial is not None else initial_policy(model, cfg)
    best: List[ControlNet] = []
    losses: List[LossRecord] = []
    for n in range(1, n_iter + 1):
        result = train_best_response(
            model, control, cfg, theta0, iteration=n, init=best[-1] if best else None
        )
        best.append(result.net)
        losses.extend(result.losses)
        control = control.mix(result.net, rho)
        logger.info(
            "neural picard iteration %d: final estimated cost %.5f", n, result.losses[-1].loss
        )
    return NeuralPicardResult(control=control, best_responses=best, losses=losses)


# --------------------------------------------------------------- checkpoints
def checkpoint_dict(control: MixedControl, model: GameModel) -> Dict[str, Any]:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "d": model.d,
        "N": model.N,
        "T": model.T,
        "components": [
            {"weight": f"{w.numerator}/{w.denominator}", **net.to_dict()}
            for w, net in control.components
        ],
    }


def load_checkpoint(payload: Dict[str, Any], model: GameModel) -> MixedControl:
    _require_torch()
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a mixed-control checkpoint: format={payload.get('format')!r}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {payload.get('version')!r}")
    if payload.get("d") != model.d:
        raise ValueError(f"checkpoint is for d={payload.get('d')}, model has d={model.d}")
    return MixedControl(
        (Fraction(item["weight"]), ControlNet.from_dict(model.d, item))
        for item in payload["components"]
    )


__all__ = [
    "ControlNet",
    "LossRecord",
    "MixedControl",
    "NetControl",
    "NeuralPicardResult",
    "TrainConfig",
    "TrainingDivergedError",
    "TrainingResult",
    "baseline_curve",
    "checkpoint_dict",
    "encode",
    "initial_policy",
    "load_checkpoint",
    "net_eval",
    "neural_picard_run",
    "policy_gradient",
    "surrogate_loss",
    "train_best_response",
]
