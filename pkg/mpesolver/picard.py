"""
Picard and weighted Picard iterations on feedback controls.

Iteration ``n`` takes ``v^(n) = v^{beta^(n-1)}``, forms the best response
``alpha^(n) = alpha_hat(x, mu, Delta_x v^(n))`` and mixes
``beta^(n) = rho beta^(n-1) + (1 - rho) alpha^(n)``. The residual reported
for iteration ``n`` is ``sup_t |v^(n+1)(t) - v^(n)(t)|_2``, so every
iteration costs exactly one HJB solve after the initial one.

The corrupted variant adds nonnegative noise ``eps^(n)`` to the best
response before mixing and runs alongside the clean iteration, recording
``sup_t |beta_hat^(n)(t) - beta^(n)(t)|_2^2``.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .game_model import GameModel
from .ode_backend import ControlField, OdeConfig, TimeGrid, ValueField, solve_hjb, sup_norm

logger = logging.getLogger(__name__)

Perturbation = Callable[[int, Tuple[int, ...]], np.ndarray]


class RateFit(NamedTuple):
    """Least-squares line through ``(n, log residual_n)``."""

    slope: float
    intercept: float
    r_squared: float

    @property
    def gamma(self) -> float:
        """Empirical contraction factor per iteration."""
        return float(np.exp(self.slope))


@dataclass
class PicardConfig:
    """Settings of one (weighted) Picard run.

    :param rho: Weight of the previous control, ``0 <= rho < 1``.
    :param max_iter: Upper bound on the number of iterations.
    :param tol: Stop once the value residual drops below this.
    :param grid: Time grid shared by controls and values.
    :param ode: Integrator tolerances.
    :param initial_control: ``beta^(0)``; ``None`` means the zero control.
    """

    grid: TimeGrid
    rho: float = 0.0
    max_iter: int = 100
    tol: float = 1e-6
    ode: OdeConfig = field(default_factory=OdeConfig)
    initial_control: Optional[ControlField] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        if self.tol <= 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be at least 1, got {self.max_iter}")
        if self.initial_control is not None and self.initial_control.grid != self.grid:
            raise ValueError("initial_control must live on the run's time grid")


@dataclass
class PicardReport:
    residuals: List[float]
    final_value: ValueField
    final_control: ControlField
    rate_fit: Optional[RateFit]
    iterations_run: int
    converged: bool
    elapsed: float = 0.0
    bound_violations: int = 0

    def summary(self) -> dict:
        fit = self.rate_fit
        return {
            "converged": self.converged,
            "iterations_run": self.iterations_run,
            "final_residual": self.residuals[-1] if self.residuals else None,
            "rate_fit": None if fit is None else {
                "slope": fit.slope,
                "intercept": fit.intercept,
                "r_squared": fit.r_squared,
                "gamma": fit.gamma,
            },
            "elapsed_seconds": self.elapsed,
            "bound_violations": self.bound_violations,
        }


class PicardIterate(NamedTuple):
    n: int
    best_response: ControlField
    control: ControlField
    value: ValueField
    residual: float


def _minimize_on(model: GameModel, value: ValueField) -> ControlField:
    return ControlField(value.grid, model.minimizer_table(model.differences(value.data)))


def best_response(
    model: GameModel,
    beta: ControlField,
    grid: TimeGrid,
    ode_cfg: Optional[OdeConfig] = None,
) -> Tuple[ControlField, ValueField]:
    """``alpha*(beta)`` on the grid together with ``v^beta``."""
    value = solve_hjb(model, beta, grid, ode_cfg)
    return _minimize_on(model, value), value


def residual_floor(model: GameModel, value: ValueField, ode_cfg: OdeConfig) -> float:
    """Residual level below which iterates only move by integrator noise."""
    scale = float(np.max(np.abs(value.data))) if value.data.size else 0.0
    return 10.0 * np.sqrt(model.space.n_states) * (ode_cfg.atol + ode_cfg.rtol * scale)


def fit_rate(residuals: Sequence[float], floor: Optional[float] = None) -> RateFit:
    """Fit ``log residual_n = slope * n + intercept``.

    With *floor* set, only residuals above it take part; ``n`` keeps the
    original 1-based iteration index.
    """
    values = np.asarray(residuals, dtype=float)
    index = np.arange(1, values.size + 1, dtype=float)
    if floor is not None:
        keep = values > floor
        values, index = values[keep], index[keep]
    if values.size < 3:
        raise ValueError(f"need at least 3 residuals to fit a rate, got {values.size}")
    if np.any(values <= 0) or not np.all(np.isfinite(values)):
        raise ValueError("residuals must be finite and positive")
    logs = np.log(values)
    design = np.column_stack([index, np.ones_like(index)])
    (slope, intercept), *_ = np.linalg.lstsq(design, logs, rcond=None)
    predicted = intercept + slope * index
    ss_res = float(np.sum((logs - predicted) ** 2))
    ss_tot = float(np.sum((logs - logs.mean()) ** 2))
    r_squared = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return RateFit(slope=float(slope), intercept=float(intercept), r_squared=r_squared)


def iterate_picard(
    model: GameModel, cfg: PicardConfig, perturb: Optional[Perturbation] = None
) -> Iterator[PicardIterate]:
    """Endless stream of iterates; *perturb* adds ``eps^(n)`` to each best response."""
    grid = cfg.grid
    beta = cfg.initial_control or ControlField.zeros(grid, model.space)
    value = solve_hjb(model, beta, grid, cfg.ode)
    n = 0
    while True:
        n += 1
        alpha = _minimize_on(model, value)
        target = alpha.data
        if perturb is not None:
            target = target + perturb(n, target.shape)
        beta = ControlField(grid, cfg.rho * beta.data + (1.0 - cfg.rho) * target)
        new_value = solve_hjb(model, beta, grid, cfg.ode)
        residual = sup_norm(new_value.data - value.data)
        value = new_value
        yield PicardIterate(n=n, best_response=alpha, control=beta, value=value, residual=residual)


def _check_bound(beta: ControlField, c_a: float, n: int) -> bool:
    peak = float(np.max(np.linalg.norm(beta.data, axis=-1))) if beta.data.size else 0.0
    if peak > c_a:
        logger.warning(
            "iteration %d: control norm %.4g exceeds the a priori bound c_a=%.4g", n, peak, c_a
        )
        return True
    return False


def _report(
    model: GameModel,
    cfg: PicardConfig,
    last: PicardIterate,
    residuals: List[float],
    converged: bool,
    started: float,
    violations: int,
) -> PicardReport:
    floor = residual_floor(model, last.value, cfg.ode)
    try:
        rate = fit_rate(residuals, floor=floor)
    except ValueError:
        rate = None
    return PicardReport(
        residuals=residuals,
        final_value=last.value,
        final_control=last.control,
        rate_fit=rate,
        iterations_run=last.n,
        converged=converged,
        elapsed=time.perf_counter() - started,
        bound_violations=violations,
    )


def picard_run(model: GameModel, cfg: PicardConfig) -> PicardReport:
    """Run the (weighted) Picard iteration until the residual drops below ``cfg.tol``."""
    started = time.perf_counter()
    _, c_a = model.compute_bounds()
    residuals: List[float] = []
    violations = 0
    converged = False
    last: Optional[PicardIterate] = None
    for last in iterate_picard(model, cfg):
        residuals.append(last.residual)
        violations += _check_bound(last.control, c_a, last.n)
        logger.info("picard iteration %d: residual %.3e", last.n, last.residual)
        if last.residual < cfg.tol:
            converged = True
            break
        if last.n >= cfg.max_iter:
            break
    assert last is not None
    if not converged:
        logger.info("picard did not reach tol=%.1e within %d iterations", cfg.tol, cfg.max_iter)
    return _report(model, cfg, last, residuals, converged, started, violations)


def uniform_noise(delta: float, seed: int) -> Perturbation:
    """``eps^(n)`` i.i.d. uniform on ``[0, delta]`` per node, state and rate slot."""
    if delta < 0:
        raise ValueError(f"delta must be nonnegative, got {delta}")

    def draw(n: int, shape: Tuple[int, ...]) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(n,)))
        return delta * rng.random(shape)

    return draw


def picard_run_noisy(
    model: GameModel, cfg: PicardConfig, delta: float, seed: int = 0
) -> Tuple[PicardReport, List[float]]:
    """Run the corrupted iteration for ``cfg.max_iter`` steps next to the clean one.

    Returns the report of the corrupted run and the deviations
    ``sup_t |beta_hat^(n) - beta^(n)|_2^2``.
    """
    started = time.perf_counter()
    _, c_a = model.compute_bounds()
    noise = uniform_noise(delta, seed)
    residuals: List[float] = []
    deviations: List[float] = []
    violations = 0
    noisy_last: Optional[PicardIterate] = None
    for clean, noisy_last in zip(iterate_picard(model, cfg), iterate_picard(model, cfg, noise)):
        residuals.append(noisy_last.residual)
        violations += _check_bound(noisy_last.control, c_a, noisy_last.n)
        deviation = sup_norm(noisy_last.control.data - clean.control.data) ** 2
        deviations.append(deviation)
        logger.info(
            "noisy iteration %d: residual %.3e, deviation %.3e",
            noisy_last.n,
            noisy_last.residual,
            deviation,
        )
        if noisy_last.n >= cfg.max_iter:
            break
    assert noisy_last is not None
    converged = noisy_last.residual < cfg.tol
    report = _report(model, cfg, noisy_last, residuals, converged, started, violations)
    return report, deviations


__all__ = [
    "PicardConfig",
    "PicardIterate",
    "PicardReport",
    "RateFit",
    "best_response",
    "fit_rate",
    "iterate_picard",
    "picard_run",
    "picard_run_noisy",
    "residual_floor",
    "uniform_noise",
]
