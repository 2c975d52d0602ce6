import json
import math
from fractions import Fraction

import numpy as np
import pytest

torch = pytest.importorskip("torch")

from mpesolver import neural_picard  # noqa: E402
from mpesolver.config import RunConfig, train_config  # noqa: E402
from mpesolver.game_model import CustomCost, GameModel, QuadraticCost  # noqa: E402
from mpesolver.jump_simulator import (  # noqa: E402
    IID,
    THINNING,
    estimate_cost,
    segment_nodes,
    simulate_batch,
    theta_average,
)
from mpesolver.neural_picard import (  # noqa: E402
    ControlNet,
    MixedControl,
    NetControl,
    TrainConfig,
    TrainingDivergedError,
    baseline_curve,
    checkpoint_dict,
    encode,
    initial_policy,
    load_checkpoint,
    net_eval,
    neural_picard_run,
    policy_gradient,
    surrogate_loss,
    train_best_response,
)
from mpesolver.ode_backend import OdeConfig, SolverError, TimeGrid, evaluate_policy  # noqa: E402
from mpesolver.picard import PicardConfig, picard_run  # noqa: E402
from mpesolver.presets import make_cyber, make_kuramoto1, make_kuramoto2  # noqa: E402

TINY = dict(hidden_layers=1, width=4, quad_M=10, batch=4, epochs=2, log_every=0)


def idle_model():
    return GameModel(
        d=2,
        N=2,
        T=1.0,
        lambda0=lambda x, mu: (0.5,),
        lambda1=lambda x, mu: (0.0,),
        cost=QuadraticCost(lambda x, mu: float(x)),
        terminal=lambda x, mu: 0.0,
    )


def flat_params(net):
    return torch.cat([p.detach().reshape(-1) for p in net.parameters()]).numpy()


def shifted(net, direction, h):
    moved = net.clone()
    offset = 0
    with torch.no_grad():
        for p in moved.parameters():
            n = p.numel()
            step = torch.as_tensor(direction[offset : offset + n]).reshape(p.shape)
            p.add_(h * step)
            offset += n
    return moved


def test_encode_layout():
    model = make_cyber(N=4, T=2.0)
    rows = encode(model, np.array([0.0, 1.0]), 2, (1, 0, 3, 0))
    assert rows.shape == (2, 9)
    assert rows[1].tolist() == [0.5, 0, 0, 1, 0, 0.25, 0, 0.75, 0]


def test_zero_output_network_is_ln2():
    model = make_cyber(N=2, T=1.0)
    net = ControlNet(4, hidden_layers=1, width=3, zero_output=True)
    rates = net_eval(net, model, 0.4, 1, (1, 0, 1, 0))
    assert rates == pytest.approx([math.log(2)] * 3)
    assert initial_policy(model, TrainConfig(**TINY)).weights == [Fraction(1)]


def test_network_outputs_are_positive_and_seeded():
    a = ControlNet(2, hidden_layers=2, width=5, seed=3)
    b = ControlNet(2, hidden_layers=2, width=5, seed=3)
    x = torch.randn(7, 5, dtype=torch.float64)
    assert torch.all(a(x) > 0)
    assert torch.equal(a(x), b(x))
    with pytest.raises(ValueError):
        ControlNet(2, hidden_layers=0)


def test_mixed_control_weights_stay_exact():
    nets = [ControlNet(2, hidden_layers=1, width=3, seed=s) for s in range(3)]
    mixed = MixedControl.single(nets[0]).mix(nets[1], 0.5).mix(nets[2], 0.5)
    assert mixed.weights == [Fraction(1, 4), Fraction(1, 4), Fraction(1, 2)]
    x = torch.randn(4, 5, dtype=torch.float64)
    expected = 0.25 * nets[0](x) + 0.25 * nets[1](x) + 0.5 * nets[2](x)
    assert torch.allclose(mixed(x), expected)
    assert MixedControl.single(nets[0]).mix(nets[1], 0.0).weights == [Fraction(1)]
    with pytest.raises(ValueError):
        MixedControl([(Fraction(1, 2), nets[0])])
    with pytest.raises(ValueError):
        MixedControl.single(nets[0]).mix(nets[1], 1.0)


def test_net_control_tabulates_on_quadrature_grid():
    model = make_kuramoto2(N=3, T=1.0, kappa=1.0, sigma2=0.5)
    grid = TimeGrid(1.0, 5)
    net = ControlNet(2, hidden_layers=1, width=4, seed=1)
    control = NetControl(net, model, grid)
    field = control.to_field(chunk=2)
    assert field.shape == (6, 2, 4, 1)
    counts = model.space.counts(2)
    assert field.data[3, 1, 2] == pytest.approx(net_eval(net, model, 0.6, 1, counts))
    assert control.rates(0.6, 1, 2) == pytest.approx(field.data[3, 1, 2])
    mid = control.rates(0.5, 0, 1)
    assert mid == pytest.approx(0.5 * (field.data[2, 0, 1] + field.data[3, 0, 1]))
    assert control.upper_bound() == pytest.approx(field.data.max())


def test_checkpoint_round_trip():
    model = make_kuramoto2(N=3, T=1.0, kappa=1.0, sigma2=0.5)
    nets = [ControlNet(2, hidden_layers=1, width=4, seed=s) for s in range(2)]
    mixed = MixedControl.single(nets[0]).mix(nets[1], 0.3)
    payload = json.loads(json.dumps(checkpoint_dict(mixed, model)))
    restored = load_checkpoint(payload, model)
    assert restored.weights == mixed.weights
    x = torch.as_tensor(encode(model, np.linspace(0, 1, 5), 0, (1, 2)))
    assert torch.allclose(restored(x), mixed(x))
    with pytest.raises(ValueError):
        load_checkpoint({**payload, "format": "other"}, model)
    with pytest.raises(ValueError):
        load_checkpoint(payload, make_cyber(N=3))


def test_policy_gradient_shape():
    model = make_kuramoto2(N=2, T=1.0, kappa=1.0, sigma2=0.5)
    grid = TimeGrid(1.0, 10)
    net = ControlNet(2, hidden_layers=1, width=3, seed=0)
    control = NetControl(net, model, grid)
    records = simulate_batch(model, control, control, IID((0.5, 0.5)), 8, seed=0)
    grad = policy_gradient(records, net, model, grid, baseline=0.5)
    assert grad.shape == (5 * 3 + 3 + 3 + 1,)
    assert np.all(np.isfinite(grad))


def test_training_drives_useless_control_down():
    model = idle_model()
    cfg = TrainConfig(hidden_layers=1, width=4, quad_M=10, batch=8, epochs=40, lr=0.05, log_every=0)
    beta = initial_policy(model, cfg)
    start = ControlNet(2, hidden_layers=1, width=4, seed=0, zero_output=True)
    result = train_best_response(model, beta, cfg, IID((0.5, 0.5)), init=start)
    assert len(result.losses) == 40
    before = net_eval(start, model, 0.5, 0, (1, 1))[0]
    after = net_eval(result.net, model, 0.5, 0, (1, 1))[0]
    assert after < before


def test_neural_picard_mixes_best_responses():
    model = make_kuramoto2(N=2, T=1.0, kappa=1.0, sigma2=0.5)
    cfg = TrainConfig(**TINY)
    result = neural_picard_run(model, IID((0.5, 0.5)), n_iter=2, rho=0.5, cfg=cfg)
    assert len(result.best_responses) == 2
    assert result.control.weights == [Fraction(1, 4), Fraction(1, 4), Fraction(1, 2)]
    assert [(r.iteration, r.epoch) for r in result.losses] == [(1, 0), (1, 1), (2, 0), (2, 1)]
    assert all(np.isfinite(r.loss) for r in result.losses)


def test_zero_iterations_return_initial_policy():
    model = make_kuramoto2(N=2, T=1.0, kappa=1.0, sigma2=0.5)
    result = neural_picard_run(model, IID((0.5, 0.5)), n_iter=0, rho=0.0, cfg=TrainConfig(**TINY))
    assert result.best_responses == [] and result.losses == []
    assert result.control.weights == [Fraction(1)]
    with pytest.raises(ValueError):
        neural_picard_run(model, IID((0.5, 0.5)), n_iter=-1, rho=0.0, cfg=TrainConfig(**TINY))
    with pytest.raises(ValueError):
        neural_picard_run(model, IID((0.5, 0.5)), n_iter=1, rho=1.0, cfg=TrainConfig(**TINY))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch=1)
    with pytest.raises(ValueError):
        TrainConfig(baseline="median")
    with pytest.raises(ValueError):
        TrainConfig(quad_M=0)
    assert issubclass(TrainingDivergedError, SolverError)


def test_missing_torch_is_reported(monkeypatch):
    monkeypatch.setattr(neural_picard, "torch", None)
    with pytest.raises(ImportError, match="mpesolver\\[neural\\]"):
        ControlNet(2)


def test_net_control_bound_is_tabulated_once(monkeypatch):
    model = make_kuramoto2(N=3, T=1.0, kappa=1.0, sigma2=0.5)
    control = NetControl(ControlNet(2, hidden_layers=1, width=4, seed=1), model, TimeGrid(1.0, 5))
    calls = []
    original = control.to_field

    def counting(*args, **kwargs):
        calls.append(1)
        return original(*args, **kwargs)

    monkeypatch.setattr(control, "to_field", counting)
    first = control.upper_bound()
    assert control.upper_bound() == first
    assert len(calls) == 1
    assert control.varies_in_time()


def test_net_eval_parameter_gradient_matches_finite_differences():
    model = make_cyber(N=3, T=2.0)
    net = ControlNet(4, hidden_layers=2, width=5, seed=7)
    features = torch.as_tensor(encode(model, np.array([0.7]), 2, (1, 0, 1, 1)))
    out = net(features).sum()
    grad = torch.cat([g.reshape(-1) for g in torch.autograd.grad(out, net.parameters())]).numpy()
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(3):
        direction = rng.standard_normal(grad.size)
        up = net_eval(shifted(net, direction, h), model, 0.7, 2, (1, 0, 1, 1)).sum()
        down = net_eval(shifted(net, direction, -h), model, 0.7, 2, (1, 0, 1, 1)).sum()
        assert (up - down) / (2 * h) == pytest.approx(grad @ direction, rel=1e-5)


def test_policy_gradient_vanishes_for_an_inert_control():
    model = GameModel(
        d=2,
        N=2,
        T=1.0,
        lambda0=lambda x, mu: (0.8,),
        lambda1=lambda x, mu: (0.0,),
        cost=CustomCost(
            lambda x, mu, a: 0.0 * a.sum(-1) + float(x),
            lambda x, mu, p, lam1: np.zeros(1),
            gamma=1.0,
        ),
        terminal=lambda x, mu: float(mu[0]),
    )
    grid = TimeGrid(1.0, 10)
    net = ControlNet(2, hidden_layers=1, width=3, seed=0)
    control = NetControl(net, model, grid)
    records = simulate_batch(model, control, control, IID((0.5, 0.5)), 16, seed=3)
    assert any(r.tagged_jumps for r in records)
    grad = policy_gradient(records, net, model, grid, baseline=baseline_curve(records, grid))
    assert np.allclose(grad, 0.0, atol=1e-14)


def test_policy_gradient_is_pathwise_when_jumps_ignore_the_control():
    model = idle_model()
    grid = TimeGrid(1.0, 10)
    net = ControlNet(2, hidden_layers=1, width=3, seed=2)
    control = NetControl(net, model, grid)
    records = simulate_batch(model, control, control, IID((0.5, 0.5)), 12, seed=1)
    assert all(r.mode == THINNING for r in records)

    total = torch.zeros((), dtype=torch.float64)
    for record in records:
        for seg in record.segments:
            if seg.end <= seg.start:
                continue
            table = net(torch.as_tensor(encode(model, grid.nodes, seg.x, model.space.counts(seg.mu_index))))
            pts = segment_nodes(grid, seg.start, seg.end)
            k, w = grid.locate(pts)
            wt = torch.as_tensor(w)[:, None]
            a = (1 - wt) * table[torch.as_tensor(k)] + wt * table[torch.as_tensor(k) + 1]
            gaps = np.diff(pts)
            weights = np.zeros(pts.size)
            weights[:-1] += 0.5 * gaps
            weights[1:] += 0.5 * gaps
            total = total + (torch.as_tensor(weights) * 0.5 * (a * a).sum(-1)).sum()
    expected = torch.autograd.grad(total / len(records), net.parameters())
    expected = torch.cat([g.reshape(-1) for g in expected]).numpy()

    for baseline in (0.0, 3.0, baseline_curve(records, grid)):
        grad = policy_gradient(records, net, model, grid, baseline=baseline)
        assert np.allclose(grad, expected, rtol=1e-10, atol=1e-14)


def test_policy_gradient_matches_finite_differences_on_a_fixed_batch():
    model = make_kuramoto2(N=3, T=1.0, kappa=1.0, sigma2=0.5)
    grid = TimeGrid(1.0, 10)
    net = ControlNet(2, hidden_layers=1, width=4, seed=5)
    control = NetControl(net, model, grid)
    records = simulate_batch(model, control, control, IID((0.5, 0.5)), 16, seed=8)
    curve = baseline_curve(records, grid)
    grad = policy_gradient(records, net, model, grid, baseline=curve)
    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(3):
        direction = rng.standard_normal(grad.size)
        up = surrogate_loss(records, shifted(net, direction, h), model, grid, curve).item()
        down = surrogate_loss(records, shifted(net, direction, -h), model, grid, curve).item()
        assert (up - down) / (2 * h) == pytest.approx(grad @ direction, rel=1e-3)


def test_baseline_curve_starts_at_the_mean_cost():
    model = make_kuramoto2(N=2, T=1.0, kappa=1.0, sigma2=0.5)
    grid = TimeGrid(1.0, 10)
    control = NetControl(ControlNet(2, hidden_layers=1, width=3, seed=0), model, grid)
    records = simulate_batch(model, control, control, IID((0.5, 0.5)), 10, seed=2)
    curve = baseline_curve(records, grid)
    assert curve.shape == (11,)
    assert curve[0] == pytest.approx(np.mean([r.cost for r in records]))
    assert curve[-1] == pytest.approx(np.mean([r.terminal_cost for r in records]))
    assert np.all(np.diff(curve) <= 1e-12)
    with pytest.raises(ValueError):
        surrogate_loss(records, control.policy, model, grid, np.zeros(3))


@pytest.mark.slow
def test_neural_picard_recovers_the_ode_equilibrium():
    model = make_kuramoto1(N=10, T=1.0, kappa=2.0)
    grid = TimeGrid(1.0, 100)
    tight = OdeConfig(rtol=1e-10, atol=1e-12)
    report = picard_run(model, PicardConfig(grid=grid, tol=1e-8, max_iter=200, ode=tight))
    target = report.final_control
    theta0 = IID((0.5, 0.5))

    cfg = train_config(RunConfig(), threads=4)
    result = neural_picard_run(model, theta0, n_iter=10, rho=0.0, cfg=cfg)
    learned = NetControl(result.control, model, TimeGrid(model.T, cfg.quad_M))

    times = np.linspace(0.0, 1.0, 11)
    visits = simulate_batch(model, target, target, theta0, 2000, seed=5)
    counts = {}
    for record in visits:
        starts = np.array([s.start for s in record.segments])
        which = np.clip(np.searchsorted(starts, times, side="right") - 1, 0, len(starts) - 1)
        for t, k in zip(times, which):
            seg = record.segments[int(k)]
            key = (float(t), seg.x, seg.mu_index)
            counts[key] = counts.get(key, 0) + 1
    frequent = [key for key, n in counts.items() if n >= 0.01 * len(visits)]
    assert frequent
    deviations = [
        abs(learned.rates(t, x, i)[0] - target.rates(t, x, i)[0]) for t, x, i in frequent
    ]
    assert np.mean(deviations) <= 0.1

    exact = theta_average(evaluate_policy(model, target, target, grid, tight), theta0, model)
    est = estimate_cost(model, learned, learned, theta0, 4000, seed=9, threads=4)
    assert abs(est.mean - exact) <= 3 * est.stderr
