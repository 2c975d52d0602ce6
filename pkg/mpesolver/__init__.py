"""
mpesolver
================

Markov perfect equilibria of symmetric ``N+1`` player games in continuous
time on a finite state space.

Every player moves between ``d`` states with rates
``lambda0(x, mu) + lambda1(x, mu) * a`` controlled through a nonnegative
action ``a`` and pays a quadratic running cost plus a terminal cost, both
depending on the empirical distribution ``mu`` of the other ``N`` players.
The package computes feedback equilibria of such games in two ways:

* ``picard_run`` alternates backward HJB solves with pointwise best
  responses, optionally damped by a weight ``rho``; ``solve_nll_direct``
  integrates the equilibrium ODE system in one pass for comparison.
* ``neural_picard_run`` replaces the ODE solves by exact jump simulation of
  all ``N+1`` players and trains a neural best response per iteration with a
  score-function gradient (requires the ``neural`` extra, i.e. PyTorch).

``exploitability`` certifies a control as an ``eps``-equilibrium on the time
grid, ``picard_run_noisy`` measures how corrupted best responses propagate,
and ``presets`` holds the two-state synchronization games and the four-state
cyber-security game. The state space is the tagged player's state times the
discretized simplex of the others, enumerated in colexicographic order.

Usage example::

    from mpesolver import PicardConfig, TimeGrid, build_model, exploitability, picard_run

    model = build_model("kuramoto1", N=50)
    cfg = PicardConfig(grid=TimeGrid.from_step(model.T, 0.01), tol=1e-8)
    report = picard_run(model, cfg)
    cert = exploitability(model, report.final_control, cfg.grid)
    print(report.converged, cert.epsilon)

The ``mpesolver`` command wraps the same pipeline and writes CSV tables and
a run manifest; see :mod:`mpesolver.cli`.
"""

from .config import ConfigError, RunConfig, apply_overrides, build_run, load_config  # noqa: F401
from .game_model import CostModel, CustomCost, GameModel, QuadraticCost  # noqa: F401
from .jump_simulator import (  # noqa: F401
    IID,
    Deterministic,
    TrajectoryRecord,
    estimate_cost,
    simulate_batch,
    simulate_batch_async,
    simulate_trajectory,
)
from .neural_picard import (  # noqa: F401
    ControlNet,
    MixedControl,
    NetControl,
    TrainConfig,
    TrainingDivergedError,
    neural_picard_run,
    train_best_response,
)
from .ode_backend import (  # noqa: F401
    ControlField,
    OdeConfig,
    SolverError,
    TimeGrid,
    ValueField,
    evaluate_policy,
    solve_hjb,
    solve_nll_direct,
)
from .picard import PicardConfig, PicardReport, best_response, picard_run, picard_run_noisy  # noqa: F401
from .presets import PRESETS, build_model, make_cyber, make_kuramoto1, make_kuramoto2  # noqa: F401
from .run_archive import RunArchive  # noqa: F401
from .state_space import JointSpace, enumerate_simplex  # noqa: F401
from .storage_backends import LocalStorageBackend, StorageBackend  # noqa: F401
from .verification import EquilibriumCertificate, compare_pipelines, exploitability  # noqa: F401

__version__ = "0.1.0"

__all__ = [
    "CostModel",
    "ConfigError",
    "ControlField",
    "ControlNet",
    "CustomCost",
    "Deterministic",
    "EquilibriumCertificate",
    "GameModel",
    "IID",
    "JointSpace",
    "LocalStorageBackend",
    "MixedControl",
    "NetControl",
    "OdeConfig",
    "PRESETS",
    "PicardConfig",
    "PicardReport",
    "QuadraticCost",
    "RunArchive",
    "RunConfig",
    "SolverError",
    "StorageBackend",
    "TimeGrid",
    "TrainConfig",
    "TrainingDivergedError",
    "TrajectoryRecord",
    "ValueField",
    "apply_overrides",
    "best_response",
    "build_model",
    "build_run",
    "compare_pipelines",
    "enumerate_simplex",
    "estimate_cost",
    "evaluate_policy",
    "exploitability",
    "load_config",
    "make_cyber",
    "make_kuramoto1",
    "make_kuramoto2",
    "neural_picard_run",
    "picard_run",
    "picard_run_noisy",
    "simulate_batch",
    "simulate_batch_async",
    "simulate_trajectory",
    "solve_hjb",
    "solve_nll_direct",
    "train_best_response",
]
