import logging

import numpy as np
import pytest

from mpesolver import verification
from mpesolver.game_model import GameModel, QuadraticCost
from mpesolver.ode_backend import ControlField, OdeConfig, TimeGrid, ValueField
from mpesolver.picard import PicardConfig, picard_run
from mpesolver.presets import make_cyber, make_kuramoto1
from mpesolver.verification import (
    compare_pipelines,
    exploitability,
    exploitability_trace,
    field_norm,
    sup_norm,
)

TIGHT = OdeConfig(rtol=1e-10, atol=1e-12)


def uncontrolled_model(N=4):
    return GameModel(
        d=2,
        N=N,
        T=1.0,
        lambda0=lambda x, mu: (0.3,),
        lambda1=lambda x, mu: (0.0,),
        cost=QuadraticCost(lambda x, mu: float(x) + mu[0] / N),
        terminal=lambda x, mu: float(mu[1 - x]) / N,
    )


def test_norms_accept_fields_and_arrays():
    grid = TimeGrid(1.0, 4)
    data = np.zeros((5, 2, 3))
    data[2, 0, 0] = 3.0
    data[2, 1, 2] = 4.0
    field = ValueField(grid, data)
    assert field_norm(field, 2) == pytest.approx(5.0)
    assert field_norm(data, 0) == 0.0
    assert sup_norm(field) == pytest.approx(5.0)


def test_zero_control_is_not_an_equilibrium():
    model = make_kuramoto1(N=20)
    grid = TimeGrid(1.0, 100)
    cert = exploitability(model, ControlField.zeros(grid, model.space), grid)
    assert cert.epsilon >= 1e-2
    assert cert.raw_epsilon == cert.epsilon
    assert 0.0 <= cert.t <= 1.0
    assert sum(cert.counts) == 20


def test_converged_control_is_an_approximate_equilibrium():
    model = make_kuramoto1(N=20)
    grid = TimeGrid(1.0, 100)
    report = picard_run(model, PicardConfig(grid=grid, tol=1e-8, ode=TIGHT))
    assert report.converged
    cert = exploitability(model, report.final_control, grid, TIGHT)
    assert cert.epsilon <= 1e-5


def test_exploitability_shrinks_with_tolerance():
    model = make_kuramoto1(N=10)
    grid = TimeGrid(1.0, 100)
    eps = []
    for tol in (1e-3, 1e-5, 1e-8):
        report = picard_run(model, PicardConfig(grid=grid, tol=tol, ode=TIGHT))
        eps.append(exploitability(model, report.final_control, grid, TIGHT).epsilon)
    assert eps[0] >= eps[1] - 1e-9
    assert eps[1] >= eps[2] - 1e-9


def test_uncontrolled_rates_give_zero_exploitability():
    model = uncontrolled_model()
    grid = TimeGrid(1.0, 50)
    cert = exploitability(model, ControlField.zeros(grid, model.space), grid, TIGHT)
    assert cert.epsilon == pytest.approx(0.0, abs=1e-7)


def test_negative_gap_is_clamped(monkeypatch, caplog):
    model = uncontrolled_model()
    grid = TimeGrid(1.0, 10)
    real = verification.evaluate_policy

    def cheaper(*args, **kwargs):
        cost = real(*args, **kwargs)
        return ValueField(cost.grid, cost.data - 1.0)

    monkeypatch.setattr(verification, "evaluate_policy", cheaper)
    with caplog.at_level(logging.WARNING):
        cert = exploitability(model, ControlField.zeros(grid, model.space), grid)
    assert cert.epsilon == 0.0
    assert cert.raw_epsilon < 0
    assert "clamped" in caplog.text


def test_certificate_dict_uses_labels():
    model = make_cyber(N=2, T=1.0)
    grid = TimeGrid(1.0, 10)
    cert = exploitability(model, ControlField.zeros(grid, model.space), grid)
    payload = cert.to_dict(model.state_labels)
    assert payload["argmax"]["x"] in model.state_labels
    assert payload["grid"] == {"T": 1.0, "M": 10}
    assert set(payload) == {"epsilon", "raw_epsilon", "argmax", "grid", "ode"}
    assert isinstance(cert.to_dict()["argmax"]["x"], int)


def test_exploitability_trace_decays():
    model = make_kuramoto1(N=10)
    grid = TimeGrid(1.0, 50)
    trace = exploitability_trace(model, PicardConfig(grid=grid, ode=TIGHT), iterations=4)
    assert len(trace) == 4
    assert trace[-1] < trace[0]


def test_compare_pipelines_agree_on_kuramoto1():
    model = make_kuramoto1(N=20)
    grid = TimeGrid(1.0, 100)
    comparison = compare_pipelines(model, PicardConfig(grid=grid, tol=1e-8, ode=TIGHT))
    assert not comparison.unstable
    assert comparison.value_gap <= 1e-4
    assert list(comparison.slice.columns) == ["p", "z_picard", "z_direct"]
    gap = (comparison.slice["z_picard"] - comparison.slice["z_direct"]).abs().max()
    assert gap <= 1e-4
    summary = comparison.summary()
    assert summary["direct_unstable"] is False
    assert summary["picard"]["converged"] is True


def test_compare_pipelines_without_slice_for_four_states():
    model = make_cyber(N=2, T=1.0)
    comparison = compare_pipelines(model, PicardConfig(grid=TimeGrid(1.0, 20), tol=1e-8))
    assert comparison.slice is None


@pytest.mark.slow
def test_compare_pipelines_agree_at_desk_scale():
    model = make_kuramoto1(N=100)
    comparison = compare_pipelines(model, PicardConfig(grid=TimeGrid(1.0, 100), tol=1e-8, ode=TIGHT))
    assert not comparison.unstable
    gap = (comparison.slice["z_picard"] - comparison.slice["z_direct"]).abs().max()
    assert gap <= 1e-4
