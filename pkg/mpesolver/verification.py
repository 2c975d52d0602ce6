"""
Equilibrium certificates and pipeline comparisons.

The exploitability of a control ``beta`` is the largest gain a single
player can obtain by deviating while everyone else keeps ``beta``:

    eps(beta) = max_{t_k, x, mu} [ J(t_k, x, mu, beta; beta) - v^beta(t_k, x, mu) ]

``beta`` is then an ``eps``-equilibrium on the grid. The maximum runs over
grid nodes only and the grid is part of the certificate.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Union

import numpy as np
import pandas as pd

from .game_model import GameModel
from .ode_backend import (
    ControlField,
    OdeConfig,
    TimeGrid,
    ValueField,
    evaluate_policy,
    solve_hjb,
    solve_nll_direct,
    sup_norm as _sup_norm,
    field_norm as _field_norm,
)
from .picard import PicardConfig, PicardReport, iterate_picard, picard_run
from .presets import slice_observable
from .state_space import CountVector

logger = logging.getLogger(__name__)

Field = Union[ValueField, ControlField, np.ndarray]


def _data(psi: Field) -> np.ndarray:
    return psi if isinstance(psi, np.ndarray) else psi.data


def field_norm(psi: Field, t_node: int) -> float:
    """Euclidean norm over all states at grid node *t_node*."""
    return _field_norm(_data(psi), t_node)


def sup_norm(psi: Field) -> float:
    """Largest :func:`field_norm` over the grid nodes."""
    return _sup_norm(_data(psi))


@dataclass(frozen=True)
class EquilibriumCertificate:
    epsilon: float
    raw_epsilon: float
    t: float
    x: int
    counts: CountVector
    grid: TimeGrid
    rtol: float
    atol: float

    def to_dict(self, labels: Optional[List[str]] = None) -> Dict[str, Any]:
        return {
            "epsilon": self.epsilon,
            "raw_epsilon": self.raw_epsilon,
            "argmax": {
                "t": self.t,
                "x": labels[self.x] if labels else self.x,
                "counts": list(self.counts),
            },
            "grid": {"T": self.grid.T, "M": self.grid.M},
            "ode": {"rtol": self.rtol, "atol": self.atol},
        }


def exploitability(
    model: GameModel,
    beta: ControlField,
    grid: TimeGrid,
    ode_cfg: Optional[OdeConfig] = None,
) -> EquilibriumCertificate:
    ode_cfg = ode_cfg or OdeConfig()
    cost = evaluate_policy(model, beta, beta, grid, ode_cfg)
    value = solve_hjb(model, beta, grid, ode_cfg)
    gap = cost.data - value.data
    flat = int(np.argmax(gap))
    k, x, i = np.unravel_index(flat, gap.shape)
    raw = float(gap.flat[flat])
    if raw < 0:
        logger.warning("negative exploitability %.3e clamped to 0", raw)
    return EquilibriumCertificate(
        epsilon=max(raw, 0.0),
        raw_epsilon=raw,
        t=float(grid.nodes[k]),
        x=int(x),
        counts=model.space.counts(int(i)),
        grid=grid,
        rtol=ode_cfg.rtol,
        atol=ode_cfg.atol,
    )


def exploitability_trace(model: GameModel, cfg: PicardConfig, iterations: int) -> List[float]:
    """Exploitability of ``beta^(n)`` for ``n = 1..iterations``."""
    trace: List[float] = []
    for step in iterate_picard(model, cfg):
        cert = exploitability(model, step.control, cfg.grid, cfg.ode)
        trace.append(cert.epsilon)
        logger.info("iteration %d: exploitability %.3e", step.n, cert.epsilon)
        if step.n >= iterations:
            break
    return trace


@dataclass
class PipelineComparison:
    value_gap: float
    control_gap: float
    unstable: bool
    report: PicardReport
    direct_value: ValueField
    direct_control: Optional[ControlField]
    slice: Optional[pd.DataFrame] = None

    def summary(self) -> Dict[str, Any]:
        return {
            "value_gap": self.value_gap,
            "control_gap": self.control_gap,
            "direct_unstable": self.unstable,
            "picard": self.report.summary(),
        }


def compare_pipelines(model: GameModel, cfg: PicardConfig) -> PipelineComparison:
    """Solve the equilibrium both by direct N-NLL integration and by Picard iteration."""
    direct = solve_nll_direct(model, cfg.grid, cfg.ode)
    if direct.unstable:
        logger.warning("direct solve flagged unstable; comparison kept for inspection")
    report = picard_run(model, cfg)
    frame = None
    if model.d == 2:
        picard_slice = slice_observable(model, report.final_value)
        direct_slice = slice_observable(model, direct.value)
        frame = pd.DataFrame(
            {
                "p": [p for p, _ in picard_slice],
                "z_picard": [z for _, z in picard_slice],
                "z_direct": [z for _, z in direct_slice],
            }
        )
    if direct.control is None:
        value_gap = control_gap = math.inf
    else:
        value_gap = sup_norm(report.final_value.data - direct.value.data)
        control_gap = sup_norm(report.final_control.data - direct.control.data)
    return PipelineComparison(
        value_gap=value_gap,
        control_gap=control_gap,
        unstable=direct.unstable,
        report=report,
        direct_value=direct.value,
        direct_control=direct.control,
        slice=frame,
    )


__all__ = [
    "EquilibriumCertificate",
    "PipelineComparison",
    "compare_pipelines",
    "exploitability",
    "exploitability_trace",
    "field_norm",
    "sup_norm",
]
