"""
Built-in example games and their observables.

``kuramoto1``
    two states, no thermal noise, terminal synchronization cost.
``kuramoto2``
    two states, thermal noise ``lambda0 = sigma2`` and a running
    synchronization cost; has several mean-field equilibria once
    ``kappa > 4 sigma2^2``.
``cyber``
    four states ``(DI, DS, UI, US)`` (defended/undefended x
    infected/susceptible); players only control the defense switches.

Neither two-state game is Lasry-Lions monotone; :func:`monotonicity_defect`
evaluates the defining integral so this can be checked numerically.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .game_model import GameModel, QuadraticCost, pack_rates
from .ode_backend import TimeGrid, ValueField
from .state_space import CountVector

logger = logging.getLogger(__name__)

DEFAULT_DT = 0.01

DI, DS, UI, US = range(4)
CYBER_LABELS = ("DI", "DS", "UI", "US")
KURAMOTO_LABELS = ("0", "1")

CYBER_DEFAULTS: Dict[str, float] = {
    "v_H": 0.2,
    "qD_inf": 0.4,
    "qU_inf": 0.3,
    "qD_rec": 0.1,
    "qU_rec": 0.65,
    "lam_UU": 0.3,
    "lam_DU": 0.3,
    "lam_DD": 0.4,
    "lam_UD": 0.4,
    "k_D": 0.3,
    "k_I": 0.5,
}


def _positive(name: str, value: float) -> float:
    if not value > 0:
        raise ValueError(f"{name} must be positive, got {value}")
    return float(value)


def _nonnegative(name: str, value: float) -> float:
    if not value >= 0:
        raise ValueError(f"{name} must be nonnegative, got {value}")
    return float(value)


def _synchronization(kappa: float, N: int) -> Callable[[int, CountVector], float]:
    """``kappa (mu({1}) chi_{x=0} + mu({0}) chi_{x=1})``."""

    def cost(x: int, counts: CountVector) -> float:
        return kappa * counts[1 - x] / N

    return cost


def nonuniqueness_regime(kappa: float, sigma2: float) -> bool:
    """Whether the mean-field limit of ``kuramoto2`` has several equilibria."""
    return kappa > 4.0 * sigma2**2


def make_kuramoto1(N: int, T: float = 1.0, kappa: float = 2.0) -> GameModel:
    _positive("N", N)
    _positive("T", T)
    kappa = _positive("kappa", kappa)
    return GameModel(
        d=2,
        N=N,
        T=T,
        lambda0=lambda x, mu: (0.0,),
        lambda1=lambda x, mu: (1.0,),
        cost=QuadraticCost(),
        terminal=_synchronization(kappa, N),
        name="kuramoto1",
        state_labels=KURAMOTO_LABELS,
        metadata={"kappa": kappa},
    )


def make_kuramoto2(N: int, T: float = 10.0, kappa: float = 6.0, sigma2: float = 0.5) -> GameModel:
    _positive("N", N)
    _positive("T", T)
    kappa = _positive("kappa", kappa)
    sigma2 = _nonnegative("sigma2", sigma2)
    regime = nonuniqueness_regime(kappa, sigma2)
    if regime:
        logger.warning(
            "kuramoto2 with kappa=%g > 4*sigma2^2=%g: the mean-field game has several equilibria",
            kappa,
            4.0 * sigma2**2,
        )
    return GameModel(
        d=2,
        N=N,
        T=T,
        lambda0=lambda x, mu: (sigma2,),
        lambda1=lambda x, mu: (1.0,),
        cost=QuadraticCost(_synchronization(kappa, N)),
        terminal=lambda x, mu: 0.0,
        name="kuramoto2",
        state_labels=KURAMOTO_LABELS,
        metadata={"kappa": kappa, "sigma2": sigma2, "nonuniqueness_regime": regime},
    )


def cyber_parameters(params: Optional[Mapping[str, float]] = None) -> Dict[str, float]:
    merged = dict(CYBER_DEFAULTS)
    for key, value in (params or {}).items():
        if key not in CYBER_DEFAULTS:
            raise ValueError(f"unknown cyber parameter {key!r}; expected one of {sorted(CYBER_DEFAULTS)}")
        merged[key] = _nonnegative(key, value)
    return merged


def make_cyber(N: int = 24, T: float = 10.0, params: Optional[Mapping[str, float]] = None) -> GameModel:
    _positive("N", N)
    _positive("T", T)
    p = cyber_parameters(params)

    def uncontrolled(x: int, counts: CountVector) -> np.ndarray:
        mu = np.asarray(counts, dtype=float) / N
        row = np.zeros(4)
        if x == DI:
            row[DS] = p["qD_rec"]
        elif x == DS:
            row[DI] = p["v_H"] * p["qD_inf"] + p["lam_DD"] * mu[DI] + p["lam_UD"] * mu[UI]
        elif x == UI:
            row[US] = p["qU_rec"]
        else:
            row[UI] = p["v_H"] * p["qU_inf"] + p["lam_UU"] * mu[UI] + p["lam_DU"] * mu[DI]
        return pack_rates(x, row)

    switch = {DI: UI, DS: US, UI: DI, US: DS}

    def gains(x: int, counts: CountVector) -> np.ndarray:
        row = np.zeros(4)
        row[switch[x]] = 1.0
        return pack_rates(x, row)

    state_cost = {
        DI: p["k_D"] + p["k_I"],
        DS: p["k_D"],
        UI: p["k_I"],
        US: 0.0,
    }
    return GameModel(
        d=4,
        N=N,
        T=T,
        lambda0=uncontrolled,
        lambda1=gains,
        cost=QuadraticCost(lambda x, counts: state_cost[x]),
        terminal=lambda x, counts: 0.0,
        name="cyber",
        state_labels=CYBER_LABELS,
        metadata=dict(p),
    )


def rate_matrix(model: GameModel, counts: Sequence[int], actions: np.ndarray) -> np.ndarray:
    """Generator matrix of one player facing *counts*; row ``x`` uses ``actions[x]``."""
    mu_index = model.space.simplex.rank(counts)
    Q = np.zeros((model.d, model.d))
    for x in range(model.d):
        rates = model.lambda0_at(x, mu_index) + model.lambda1_at(x, mu_index) * np.asarray(actions[x])
        Q[x] = np.insert(rates, x, 0.0)
        Q[x, x] = -rates.sum()
    return Q


def slice_observable(model: GameModel, value: ValueField, t_node: int = 0) -> List[Tuple[float, float]]:
    """``(p, v(t, 0, mu) - v(t, 1, mu))`` with ``p = mu({1})``, sorted by ``p``."""
    if model.d != 2:
        raise ValueError(f"the slice observable needs d=2, got d={model.d}")
    data = value.data[t_node]
    rows = [
        (counts[1] / model.N, float(data[0, i] - data[1, i]))
        for i, counts in enumerate(model.space.simplex)
    ]
    return sorted(rows)


def monotonicity_defect(
    cost_fn: Callable[[int, CountVector], float],
    counts_a: Sequence[int],
    counts_b: Sequence[int],
) -> float:
    """``sum_x (c(x, mu_b) - c(x, mu_a)) (mu_b - mu_a)(x)``; negative values break monotonicity."""
    a = np.asarray(counts_a, dtype=float)
    b = np.asarray(counts_b, dtype=float)
    N = a.sum()
    if N <= 0 or b.sum() != N:
        raise ValueError("count vectors must share a positive total")
    ta, tb = tuple(int(c) for c in counts_a), tuple(int(c) for c in counts_b)
    return float(sum((cost_fn(x, tb) - cost_fn(x, ta)) * (b[x] - a[x]) / N for x in range(a.size)))


@dataclass(frozen=True)
class Preset:
    name: str
    description: str
    factory: Callable[..., GameModel]
    N: int
    T: float
    params: Dict[str, float] = field(default_factory=dict)

    def build(
        self, N: Optional[int] = None, T: Optional[float] = None, params: Optional[Mapping[str, Any]] = None
    ) -> GameModel:
        merged = dict(self.params)
        for key, value in (params or {}).items():
            if key not in self.params:
                raise ValueError(f"preset {self.name!r} has no parameter {key!r}; expected one of {sorted(self.params)}")
            merged[key] = float(value)
        N = self.N if N is None else N
        T = self.T if T is None else T
        if self.name == "cyber":
            return self.factory(N, T, merged)
        return self.factory(N, T, **merged)

    def default_grid(self, T: Optional[float] = None) -> TimeGrid:
        return TimeGrid.from_step(self.T if T is None else T, DEFAULT_DT)


PRESETS: Dict[str, Preset] = {
    "kuramoto1": Preset(
        "kuramoto1",
        "two-state synchronization game with terminal coupling",
        make_kuramoto1,
        N=100,
        T=1.0,
        params={"kappa": 2.0},
    ),
    "kuramoto2": Preset(
        "kuramoto2",
        "two-state synchronization game with running coupling and thermal noise",
        make_kuramoto2,
        N=100,
        T=10.0,
        params={"kappa": 6.0, "sigma2": 0.5},
    ),
    "cyber": Preset(
        "cyber",
        "four-state cyber-security game over (DI, DS, UI, US)",
        make_cyber,
        N=24,
        T=10.0,
        params=dict(CYBER_DEFAULTS),
    ),
}


def build_model(
    preset: str, N: Optional[int] = None, T: Optional[float] = None, params: Optional[Mapping[str, Any]] = None
) -> GameModel:
    try:
        spec = PRESETS[preset]
    except KeyError:
        raise ValueError(f"unknown preset {preset!r}; available: {sorted(PRESETS)}") from None
    return spec.build(N, T, params)


__all__ = [
    "CYBER_DEFAULTS",
    "CYBER_LABELS",
    "DEFAULT_DT",
    "KURAMOTO_LABELS",
    "PRESETS",
    "Preset",
    "build_model",
    "cyber_parameters",
    "make_cyber",
    "make_kuramoto1",
    "make_kuramoto2",
    "monotonicity_defect",
    "nonuniqueness_regime",
    "rate_matrix",
    "slice_observable",
]
