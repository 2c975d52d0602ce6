"""
Command-line interface.

::

    mpesolver picard   --preset kuramoto1 --set picard.rho=0.5
    mpesolver direct   --preset kuramoto1 --compare
    mpesolver verify   --preset kuramoto1 --control runs/picard-kuramoto1/control.csv
    mpesolver simulate --preset cyber --set init.kind=iid
    mpesolver neural   --config neural.json --threads 8
    mpesolver noise    --preset kuramoto1 --set model.N=20 --set noise.delta=0.05
    mpesolver presets-list

Each run writes its tables, ``summary.json`` and ``config.json`` to
``<output>/<name>/`` and records them in the run manifest. Exit codes: 0 on
success (a Picard run that hits ``max_iter`` still succeeds, with
``converged: false`` in the summary), 2 for configuration or input errors,
3 for solver failures.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from .config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    build_run,
    dump_config,
    initial_distribution,
    load_config,
    ode_config,
    picard_config,
    simulation_mode,
    train_config,
)
from .game_model import GameModel
from .jump_simulator import (
    Control,
    distribution_bands,
    costs_frame,
    run_batch,
    summarize_costs,
    theta_average,
    trajectories_frame,
)
from .ode_backend import ControlField, SolverError, TimeGrid, ValueField, evaluate_policy, solve_nll_direct
from .picard import PicardReport, picard_run, picard_run_noisy
from .presets import PRESETS, slice_observable
from .run_archive import RunArchive, control_from_table, control_table, parse_csv, value_table
from .storage_backends import LocalStorageBackend
from .verification import compare_pipelines, exploitability

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3

LOG_FORMAT = "{asctime} [{levelname}] <{name}> {message}"


@dataclass
class CommandResult:
    summary: Dict[str, Any]
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)
    documents: Dict[str, Any] = field(default_factory=dict)
    checkpoints: Dict[str, Dict[str, Any]] = field(default_factory=dict)


@dataclass
class RunContext:
    config: RunConfig
    model: GameModel
    grid: TimeGrid
    threads: int
    control_path: Optional[str] = None
    untagged_path: Optional[str] = None
    compare: bool = False


# ------------------------------------------------------------------ helpers
def _slice_frame(model: GameModel, value: ValueField) -> pd.DataFrame:
    rows = slice_observable(model, value)
    return pd.DataFrame(rows, columns=["p", "z"])


def _field_tables(
    model: GameModel, value: ValueField, control: Optional[ControlField]
) -> Dict[str, pd.DataFrame]:
    tables = {"values.csv": value_table(model, value)}
    if control is not None:
        tables["control.csv"] = control_table(model, control)
    if model.d == 2:
        tables["slice.csv"] = _slice_frame(model, value)
    return tables


def _convergence_frame(report: PicardReport) -> pd.DataFrame:
    return pd.DataFrame(
        {"iter": range(1, len(report.residuals) + 1), "residual": report.residuals},
        columns=["iter", "residual"],
    )


def _model_summary(ctx: RunContext) -> Dict[str, Any]:
    model = ctx.model
    return {
        "name": model.name,
        "d": model.d,
        "N": model.N,
        "T": model.T,
        "states": list(model.state_labels),
        "params": dict(model.metadata),
        "grid": {"T": ctx.grid.T, "M": ctx.grid.M},
    }


def _read_control(path: str, model: GameModel, quad_M: int) -> Control:
    """``control.csv`` tables become a :class:`ControlField`, ``.json`` files a network checkpoint."""
    file = Path(path)
    try:
        raw = file.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read control file {path}: {exc}") from exc
    if file.suffix == ".json":
        from .neural_picard import NetControl, load_checkpoint

        policy = load_checkpoint(json.loads(raw.decode("utf-8")), model)
        return NetControl(policy, model, TimeGrid(model.T, quad_M))
    return control_from_table(parse_csv(raw), model)


def _control_field(control: Control, what: str) -> ControlField:
    if isinstance(control, ControlField):
        return control
    to_field = getattr(control, "to_field", None)
    if to_field is None:
        raise ConfigError(f"{what} cannot be tabulated on a grid")
    return to_field()


# ----------------------------------------------------------------- commands
def cmd_picard(ctx: RunContext) -> CommandResult:
    cfg = picard_config(ctx.config, ctx.grid)
    report = picard_run(ctx.model, cfg)
    tables = _field_tables(ctx.model, report.final_value, report.final_control)
    tables["convergence.csv"] = _convergence_frame(report)
    return CommandResult(summary=report.summary(), tables=tables)


def cmd_direct(ctx: RunContext) -> CommandResult:
    cfg = picard_config(ctx.config, ctx.grid)
    if not ctx.compare:
        solution = solve_nll_direct(ctx.model, ctx.grid, cfg.ode)
        return CommandResult(
            summary={"unstable": solution.unstable, "failed_at": solution.failed_at},
            tables=_field_tables(ctx.model, solution.value, solution.control),
        )
    comparison = compare_pipelines(ctx.model, cfg)
    tables = _field_tables(ctx.model, comparison.direct_value, comparison.direct_control)
    if comparison.slice is not None:
        tables["comparison.csv"] = comparison.slice
    summary = comparison.summary()
    summary["unstable"] = comparison.unstable
    return CommandResult(summary=summary, tables=tables)


def cmd_verify(ctx: RunContext) -> CommandResult:
    if ctx.control_path is None:
        raise ConfigError("verify needs --control")
    control = _read_control(ctx.control_path, ctx.model, ctx.config.neural.quad_M)
    beta = _control_field(control, "the control")
    cert = exploitability(ctx.model, beta, beta.grid, ode_config(ctx.config))
    document = cert.to_dict(ctx.model.state_labels)
    print(json.dumps(document, sort_keys=True))
    return CommandResult(summary=document, documents={"certificate.json": document})


def _simulate(
    ctx: RunContext, alpha: Control, beta: Control, ode_value: Optional[float]
) -> CommandResult:
    config = ctx.config
    model = ctx.model
    theta0 = initial_distribution(config, model)
    M = max(config.mc.M, config.mc.evaluations)
    records = run_batch(
        model, alpha, beta, theta0, M, config.mc.seed,
        threads=ctx.threads, mode=simulation_mode(config), rate_cap=config.mc.rate_cap,
    )
    estimate = summarize_costs(records, model)
    evaluations = records[: config.mc.evaluations]
    bands = distribution_bands(evaluations, model, ctx.grid.nodes)
    final = bands[bands["t"] == ctx.grid.nodes[-1]]
    summary: Dict[str, Any] = {
        "cost_mean": estimate.mean,
        "cost_stderr": estimate.stderr,
        "trajectories": M,
        "evaluations": len(evaluations),
        "mode": simulation_mode(config),
        "terminal_fractions": {row.state: row.mean for row in final.itertuples()},
    }
    if ode_value is not None:
        summary["ode_cost"] = ode_value
        summary["z_score"] = (
            (estimate.mean - ode_value) / estimate.stderr if estimate.stderr > 0 else None
        )
    return CommandResult(
        summary=summary,
        tables={
            "bands.csv": bands,
            "trajectories.csv": trajectories_frame(evaluations, model),
            "costs.csv": costs_frame(records),
            "cost_breakdown.csv": estimate.breakdown,
        },
    )


def cmd_simulate(ctx: RunContext) -> CommandResult:
    model = ctx.model
    if ctx.control_path is None:
        logger.info("no --control given; solving the equilibrium by Picard iteration first")
        beta_field = picard_run(model, picard_config(ctx.config, ctx.grid)).final_control
        alpha: Control = beta_field
        beta: Control = beta_field
    else:
        alpha = _read_control(ctx.control_path, model, ctx.config.neural.quad_M)
        beta = (
            alpha
            if ctx.untagged_path is None
            else _read_control(ctx.untagged_path, model, ctx.config.neural.quad_M)
        )
    ode_value = None
    if isinstance(alpha, ControlField) and isinstance(beta, ControlField) and alpha.grid == beta.grid:
        cost = evaluate_policy(model, alpha, beta, alpha.grid, ode_config(ctx.config))
        ode_value = theta_average(cost, initial_distribution(ctx.config, model), model)
    return _simulate(ctx, alpha, beta, ode_value)


def cmd_neural(ctx: RunContext) -> CommandResult:
    from .neural_picard import NetControl, checkpoint_dict, MixedControl, neural_picard_run

    config = ctx.config
    model = ctx.model
    cfg = train_config(config, threads=ctx.threads)
    theta0 = initial_distribution(config, model)
    result = neural_picard_run(model, theta0, config.neural.iters, config.neural.rho, cfg)
    quad = TimeGrid(model.T, cfg.quad_M)
    final = NetControl(result.control, model, quad)
    outcome = _simulate(ctx, final, final, None)
    outcome.tables["loss.csv"] = pd.DataFrame(
        [(r.iteration, r.epoch, r.loss) for r in result.losses], columns=["iter", "epoch", "loss"]
    )
    outcome.tables["control.csv"] = control_table(model, final.to_field())
    outcome.checkpoints["control.json"] = checkpoint_dict(result.control, model)
    for n, net in enumerate(result.best_responses, start=1):
        outcome.checkpoints[f"best_response_{n:03d}.json"] = checkpoint_dict(MixedControl.single(net), model)
    outcome.summary.update(
        {
            "iterations": config.neural.iters,
            "rho": config.neural.rho,
            "components": len(result.control.components),
        }
    )
    return outcome


def cmd_noise(ctx: RunContext) -> CommandResult:
    config = ctx.config
    cfg = picard_config(config, ctx.grid)
    cfg.max_iter = config.noise.iterations
    report, deviations = picard_run_noisy(ctx.model, cfg, config.noise.delta, config.noise.seed)
    frame = pd.DataFrame(
        {"iter": range(1, len(deviations) + 1), "deviation": deviations},
        columns=["iter", "deviation"],
    )
    summary = report.summary()
    summary.update(
        {
            "delta": config.noise.delta,
            "max_deviation": float(np.max(deviations)) if deviations else 0.0,
        }
    )
    return CommandResult(summary=summary, tables={"deviations.csv": frame})


COMMANDS: Dict[str, Callable[[RunContext], CommandResult]] = {
    "picard": cmd_picard,
    "direct": cmd_direct,
    "verify": cmd_verify,
    "simulate": cmd_simulate,
    "neural": cmd_neural,
    "noise": cmd_noise,
}


def presets_list() -> List[Dict[str, Any]]:
    return [
        {"name": p.name, "description": p.description, "N": p.N, "T": p.T, "params": dict(p.params)}
        for p in PRESETS.values()
    ]


# ------------------------------------------------------------------ plumbing
async def _persist(archive: RunArchive, result: CommandResult, config_doc: Dict[str, Any]) -> None:
    for name, frame in result.tables.items():
        await archive.write_table(name, frame)
    for name, doc in result.documents.items():
        await archive.write_json(name, doc)
    for name, payload in result.checkpoints.items():
        await archive.write_checkpoint(name, payload)
    await archive.write_json("config.json", config_doc)
    await archive.write_json("summary.json", result.summary)


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    overrides: List[str] = []
    if args.preset is not None:
        overrides.append(f"model.preset={json.dumps(args.preset)}")
    if args.seed is not None:
        overrides.append(f"mc.seed={args.seed}")
    if args.out is not None:
        overrides.append(f"output={json.dumps(args.out)}")
    if args.threads is not None:
        overrides.append(f"mc.threads={args.threads}")
    return apply_overrides(config, overrides + list(args.set or []))


def run(args: argparse.Namespace) -> int:
    config = _resolve_config(args)
    model, grid = build_run(config)
    threads = config.mc.threads or os.cpu_count() or 1
    ctx = RunContext(
        config=config,
        model=model,
        grid=grid,
        threads=threads,
        control_path=getattr(args, "control", None),
        untagged_path=getattr(args, "untagged_control", None),
        compare=getattr(args, "compare", False),
    )
    logger.info("running %s on %r with grid M=%d", args.command, model, grid.M)
    result = COMMANDS[args.command](ctx)
    result.summary = {"command": args.command, "model": _model_summary(ctx), **result.summary}
    name = args.name or f"{args.command}-{model.name}"
    config_doc = json.loads(dump_config(config))
    archive = RunArchive(
        LocalStorageBackend(config.output), name, command=args.command, config=config_doc
    )
    asyncio.run(_persist(archive, result, config_doc))
    logger.info("run %s written to %s", name, os.path.join(config.output, name))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON run configuration")
    common.add_argument("--preset", default=None, choices=sorted(PRESETS), help="built-in model")
    common.add_argument(
        "--set", action="append", default=[], metavar="KEY=VALUE",
        help="override a config value; dotted keys address sections, bare keys are model parameters",
    )
    common.add_argument("--out", default=None, help="output root directory")
    common.add_argument("--name", default=None, help="run directory name (default: <command>-<model>)")
    common.add_argument("--seed", type=int, default=None, help="Monte Carlo / training seed")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
    common.add_argument(
        "--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
    )

    parser = argparse.ArgumentParser(
        prog="mpesolver",
        description="Markov perfect equilibria of symmetric finite-state games",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("picard", parents=[common], help="(weighted) Picard iteration on HJB solves")
    direct = sub.add_parser("direct", parents=[common], help="integrate the equilibrium ODE system directly")
    direct.add_argument("--compare", action="store_true", help="also run Picard and compare slices")
    verify = sub.add_parser("verify", parents=[common], help="exploitability of a control")
    verify.add_argument("--control", required=True, help="control.csv table or network checkpoint")
    simulate = sub.add_parser("simulate", parents=[common], help="exact jump simulation of the N+1 players")
    simulate.add_argument("--control", default=None, help="tagged control (default: Picard equilibrium)")
    simulate.add_argument("--untagged-control", default=None, help="untagged control (default: --control)")
    sub.add_parser("neural", parents=[common], help="simulation-based Picard with neural best responses")
    sub.add_parser("noise", parents=[common], help="Picard iteration with corrupted best responses")
    presets = sub.add_parser("presets-list", help="list built-in models")
    presets.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT, style="{")
    if args.command == "presets-list":
        for entry in presets_list():
            print(json.dumps(entry, sort_keys=True))
        return EXIT_OK
    try:
        return run(args)
    except SolverError as exc:
        logger.error("solver failure: %s", exc)
        return EXIT_SOLVER
    except (ValueError, ImportError) as exc:
        logger.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
