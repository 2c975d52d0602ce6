"""
Run configuration.

A run is described by one JSON document validated with pydantic; unknown
keys are rejected at every level. Command-line ``--set key=value`` pairs are
applied on top of the file: dotted keys address a section
(``picard.rho=0.5``, ``model.N=20``), bare keys are model parameters named as
in the presets (``kappa=6``, ``v_H=0.25``). Values are parsed as JSON when
possible and kept as strings otherwise.

Example::

    {
      "model": {"preset": "kuramoto1", "N": 100, "params": {"kappa": 2}},
      "grid": {"T": 1.0, "M": 100},
      "picard": {"rho": 0.5, "tol": 1e-8}
    }
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .game_model import GameModel, QuadraticCost, pack_rates
from .jump_simulator import AUTO, FROZEN, IID, THINNING, Deterministic, InitialDistribution
from .ode_backend import OdeConfig, TimeGrid
from .picard import PicardConfig
from .presets import DEFAULT_DT, PRESETS, build_model

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CustomModelSpec(_Section):
    """State-independent game given by ``d x d`` matrices; diagonals are ignored."""

    d: int = Field(ge=2)
    lambda0: List[List[float]]
    lambda1: List[List[float]]
    state_cost: List[float]
    terminal: List[float]
    labels: Optional[List[str]] = None

    @model_validator(mode="after")
    def _check_shapes(self) -> "CustomModelSpec":
        d = self.d
        for name in ("lambda0", "lambda1"):
            matrix = np.asarray(getattr(self, name), dtype=float)
            if matrix.shape != (d, d):
                raise ValueError(f"{name} must be a {d}x{d} matrix, got shape {matrix.shape}")
            if np.any(matrix < 0):
                raise ValueError(f"{name} must be nonnegative")
        for name in ("state_cost", "terminal"):
            vec = getattr(self, name)
            if len(vec) != d or any(v < 0 for v in vec):
                raise ValueError(f"{name} must hold {d} nonnegative entries")
        if self.labels is not None and len(self.labels) != d:
            raise ValueError(f"labels must hold {d} entries")
        return self


class ModelSection(_Section):
    preset: Optional[str] = "kuramoto1"
    custom: Optional[CustomModelSpec] = None
    N: Optional[int] = Field(default=None, ge=1)
    params: Dict[str, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _one_source(self) -> "ModelSection":
        if self.custom is not None:
            self.preset = None
        if self.preset is None and self.custom is None:
            raise ValueError("model needs either a preset or a custom specification")
        if self.preset is not None and self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}; available: {sorted(PRESETS)}")
        if self.custom is not None and self.params:
            raise ValueError("params only apply to presets")
        return self


class GridSection(_Section):
    T: Optional[float] = Field(default=None, gt=0)
    M: Optional[int] = Field(default=None, ge=1)


class OdeSection(_Section):
    rtol: float = Field(default=1e-6, gt=0)
    atol: float = Field(default=1e-8, gt=0)


class PicardSection(_Section):
    rho: float = Field(default=0.0, ge=0, lt=1)
    max_iter: int = Field(default=100, ge=1)
    tol: float = Field(default=1e-6, gt=0)


class MonteCarloSection(_Section):
    M: int = Field(default=10_000, ge=2)
    seed: int = Field(default=0, ge=0)
    thinning: Optional[bool] = None
    rate_cap: Optional[float] = Field(default=None, gt=0)
    evaluations: int = Field(default=10, ge=1)
    threads: Optional[int] = Field(default=None, ge=1)


class NeuralSection(_Section):
    hidden_layers: int = Field(default=2, ge=1)
    width: int = Field(default=64, ge=1)
    lr: float = Field(default=3e-3, gt=0)
    epochs: int = Field(default=200, ge=1)
    batch: int = Field(default=256, ge=2)
    iters: int = Field(default=10, ge=0)
    rho: float = Field(default=0.0, ge=0, lt=1)
    baseline: Literal["moving_average", "batch_mean", "none"] = "moving_average"
    quad_M: int = Field(default=100, ge=1)
    log_every: int = Field(default=10, ge=0)


class NoiseSection(_Section):
    delta: float = Field(default=0.05, ge=0)
    seed: int = Field(default=0, ge=0)
    iterations: int = Field(default=50, ge=1)


class InitSection(_Section):
    kind: Literal["iid", "deterministic"] = "iid"
    x0: Optional[int] = Field(default=None, ge=0)
    counts: Optional[List[int]] = None
    probabilities: Optional[List[float]] = None

    @model_validator(mode="after")
    def _complete(self) -> "InitSection":
        if self.kind == "deterministic" and (self.x0 is None or self.counts is None):
            raise ValueError("a deterministic start needs both x0 and counts")
        return self

    @field_validator("probabilities")
    @classmethod
    def _probabilities(cls, value: Optional[List[float]]) -> Optional[List[float]]:
        if value is not None and (any(p < 0 for p in value) or not np.isclose(sum(value), 1.0)):
            raise ValueError("probabilities must be nonnegative and sum to 1")
        return value


class RunConfig(_Section):
    model: ModelSection = Field(default_factory=ModelSection)
    grid: GridSection = Field(default_factory=GridSection)
    ode: OdeSection = Field(default_factory=OdeSection)
    picard: PicardSection = Field(default_factory=PicardSection)
    mc: MonteCarloSection = Field(default_factory=MonteCarloSection)
    neural: NeuralSection = Field(default_factory=NeuralSection)
    noise: NoiseSection = Field(default_factory=NoiseSection)
    init: InitSection = Field(default_factory=InitSection)
    output: str = "runs"


def parse_config(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def load_config(path: Union[str, Path, None]) -> RunConfig:
    """Read and validate a JSON run configuration; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc}") from exc
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"configuration {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"configuration {path} must be a JSON object")
    return parse_config(data)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: RunConfig, overrides: Sequence[str]) -> RunConfig:
    """Apply ``key=value`` pairs and validate the result."""
    data = config.model_dump()
    for item in overrides:
        key, sep, text = item.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"override {item!r} must look like key=value")
        value = _parse_value(text.strip())
        if "." not in key:
            data["model"].setdefault("params", {})[key] = value
            continue
        *path, leaf = key.split(".")
        node = data
        for part in path:
            child = node.get(part) if isinstance(node, dict) else None
            if child is None and isinstance(node, dict) and part in node:
                child = node[part] = {}
            if not isinstance(child, dict):
                raise ConfigError(f"override {item!r} addresses unknown section {part!r}")
            node = child
        node[leaf] = value
    return parse_config(data)


def dump_config(config: RunConfig) -> bytes:
    """Deterministic JSON encoding of *config*."""
    return json.dumps(
        config.model_dump(mode="json"),
        ensure_ascii=False,
        separators=(",", ":"),
        sort_keys=True,
    ).encode("utf-8")


# ----------------------------------------------------------------- builders
def _custom_model(spec: CustomModelSpec, N: int, T: float) -> GameModel:
    lam0 = np.asarray(spec.lambda0, dtype=float)
    lam1 = np.asarray(spec.lambda1, dtype=float)
    state_cost = list(spec.state_cost)
    terminal = list(spec.terminal)
    return GameModel(
        d=spec.d,
        N=N,
        T=T,
        lambda0=lambda x, mu: pack_rates(x, lam0[x]),
        lambda1=lambda x, mu: pack_rates(x, lam1[x]),
        cost=QuadraticCost(lambda x, mu: state_cost[x]),
        terminal=lambda x, mu: terminal[x],
        name="custom",
        state_labels=spec.labels,
    )


def build_run(config: RunConfig) -> Tuple[GameModel, TimeGrid]:
    """Model and time grid described by *config*."""
    section = config.model
    try:
        if section.custom is not None:
            T = config.grid.T if config.grid.T is not None else 1.0
            model = _custom_model(section.custom, section.N or 1, T)
        else:
            model = build_model(section.preset, section.N, config.grid.T, section.params)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    M = config.grid.M if config.grid.M is not None else TimeGrid.from_step(model.T, DEFAULT_DT).M
    return model, TimeGrid(model.T, M)


def ode_config(config: RunConfig) -> OdeConfig:
    return OdeConfig(rtol=config.ode.rtol, atol=config.ode.atol)


def picard_config(config: RunConfig, grid: TimeGrid) -> PicardConfig:
    return PicardConfig(
        grid=grid,
        rho=config.picard.rho,
        max_iter=config.picard.max_iter,
        tol=config.picard.tol,
        ode=ode_config(config),
    )


def simulation_mode(config: RunConfig) -> str:
    """``mc.thinning`` forces the clock; unset leaves the choice to the controls."""
    if config.mc.thinning is None:
        return AUTO
    return THINNING if config.mc.thinning else FROZEN


def initial_distribution(config: RunConfig, model: GameModel) -> InitialDistribution:
    init = config.init
    try:
        if init.kind == "deterministic":
            dist = Deterministic(int(init.x0), tuple(init.counts))
            dist.sample(np.random.default_rng(0), model.d, model.N)
            return dist
        probabilities = init.probabilities or [1.0 / model.d] * model.d
        if len(probabilities) != model.d:
            raise ValueError(f"expected {model.d} probabilities, got {len(probabilities)}")
        return IID(tuple(probabilities))
    except ValueError as exc:
        raise ConfigError(f"invalid initial distribution: {exc}") from exc


def train_config(config: RunConfig, threads: int = 1):
    """Translate the ``neural`` section; imported lazily so torch stays optional."""
    from .neural_picard import TrainConfig

    section = config.neural
    return TrainConfig(
        epochs=section.epochs,
        batch=section.batch,
        lr=section.lr,
        baseline=section.baseline,
        seed=config.mc.seed,
        hidden_layers=section.hidden_layers,
        width=section.width,
        quad_M=section.quad_M,
        mode=simulation_mode(config),
        rate_cap=config.mc.rate_cap,
        threads=threads,
        log_every=section.log_every,
    )


__all__ = [
    "ConfigError",
    "CustomModelSpec",
    "RunConfig",
    "apply_overrides",
    "build_run",
    "dump_config",
    "initial_distribution",
    "load_config",
    "ode_config",
    "parse_config",
    "picard_config",
    "simulation_mode",
    "train_config",
]
