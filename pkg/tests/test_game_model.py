import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpesolver.game_model import (
    CustomCost,
    GameModel,
    QuadraticCost,
    delta_x,
    destinations,
    pack_rates,
    rate_slot,
    unpack_rates,
)
from mpesolver.presets import make_kuramoto1, make_kuramoto2
from mpesolver.state_space import shift


def constant_model(d=2, N=2, lam0=0.0, lam1=1.0, f=0.0, g=0.0, T=1.0):
    return GameModel(
        d=d,
        N=N,
        T=T,
        lambda0=lambda x, mu: np.full(d - 1, lam0),
        lambda1=lambda x, mu: np.full(d - 1, lam1),
        cost=QuadraticCost(lambda x, mu: f),
        terminal=lambda x, mu: g,
    )


def mixed_model(d=3, N=3):
    """Rates and costs that depend on both the state and the counts."""

    def lam0(x, mu):
        return pack_rates(x, [0.1 * (1 + y + mu[y]) for y in range(d)])

    def lam1(x, mu):
        return pack_rates(x, [0.5 + 0.25 * ((x + y) % 3) for y in range(d)])

    return GameModel(
        d=d,
        N=N,
        T=2.0,
        lambda0=lam0,
        lambda1=lam1,
        cost=QuadraticCost(lambda x, mu: 0.2 * mu[x] / N),
        terminal=lambda x, mu: float(x) + mu[0] / N,
    )


def test_rate_convention():
    assert destinations(3, 1) == [0, 2]
    assert rate_slot(1, 0) == 0
    assert rate_slot(1, 2) == 1
    assert list(pack_rates(1, [5.0, 9.0, 7.0])) == [5.0, 7.0]
    assert list(unpack_rates(1, [5.0, 7.0])) == [5.0, 0.0, 7.0]
    with pytest.raises(ValueError):
        rate_slot(2, 2)


def test_delta_x_examples():
    assert list(delta_x(lambda y, mu: 4.0, 0, (1, 1))) == [0.0]
    assert list(delta_x(lambda y, mu: [0.0, 3.0][y], 0, (1, 1))) == [3.0]
    assert list(delta_x(lambda y, mu: [1.0, 4.0, 6.0][y], 1, (1, 1, 0))) == [-3.0, 2.0]


def test_minimizer_examples():
    model = constant_model()
    assert list(model.minimizer(0, (1, 1), [-2.0])) == [2.0]
    assert list(model.minimizer(0, (1, 1), [3.0])) == [0.0]
    assert list(constant_model(lam1=2.0).minimizer(0, (1, 1), [-1.0])) == [2.0]


def test_hamiltonian_examples():
    model = make_kuramoto1(N=4)
    assert model.hamiltonian(0, (2, 2), [-3.0]) == pytest.approx(-4.5)
    assert model.hamiltonian(0, (2, 2), [3.0]) == pytest.approx(0.0)
    assert constant_model(f=0.7).hamiltonian(1, (1, 1), [0.0]) == pytest.approx(0.7)
    assert constant_model(lam0=1.0).hamiltonian(0, (1, 1), [-2.0]) == pytest.approx(-4.0)


def test_tagged_generator_examples():
    model = constant_model()
    v = lambda y, mu: [0.0, 1.0][y]
    assert model.tagged_generator(v, lambda y, mu: [2.0], 0, (1, 1)) == pytest.approx(2.0)
    assert model.tagged_generator(lambda y, mu: 5.0, lambda y, mu: [2.0], 0, (1, 1)) == 0.0
    assert model.tagged_generator(v, lambda y, mu: [0.0], 0, (1, 1)) == 0.0


def test_population_generator_examples():
    model = constant_model(N=1)
    b = 1.7
    values = {(0, (1, 0)): 2.0, (0, (0, 1)): 0.5}
    v = lambda x, mu: values.get((x, mu), 0.0)
    out = model.population_generator(v, lambda z, mu: [b], 0, (0, 1))
    assert out == pytest.approx(b * (2.0 - 0.5))
    assert model.population_generator(v, lambda z, mu: [0.0], 0, (0, 1)) == 0.0
    concentrated = constant_model(N=3)
    assert concentrated.population_generator(v, lambda z, mu: [0.0], 0, (3, 0)) == 0.0


def test_population_generator_uses_shifted_measure():
    seen = []

    def beta(z, mu):
        seen.append((z, mu))
        return [1.0, 1.0]

    model = mixed_model()
    model.population_generator(lambda x, mu: 0.0, beta, 0, (1, 2, 0))
    assert (1, (2, 1, 0)) in seen
    assert (0, (1, 2, 0)) in seen


def test_generators_annihilate_constants():
    model = mixed_model()
    beta = lambda z, mu: [0.3, 1.1]
    for mu in model.space.simplex:
        for x in range(model.d):
            assert model.tagged_generator(lambda y, m: 3.0, beta, x, mu) == pytest.approx(0.0)
            assert model.population_generator(lambda y, m: 3.0, beta, x, mu) == pytest.approx(0.0)


def test_compute_bounds_kuramoto1():
    c_v, c_a = make_kuramoto1(N=10, T=1.0, kappa=2.0).compute_bounds()
    assert c_v == pytest.approx(2.0)
    assert c_a == pytest.approx(4.0)
    assert constant_model().compute_bounds()[0] == 0.0


def test_invalid_callbacks_rejected():
    bad = GameModel(
        d=2, N=2, T=1.0,
        lambda0=lambda x, mu: [-1.0],
        lambda1=lambda x, mu: [1.0],
        cost=QuadraticCost(),
        terminal=lambda x, mu: 0.0,
    )
    with pytest.raises(ValueError):
        bad.tables
    wrong_length = constant_model(d=3)
    wrong_length.lambda1 = lambda x, mu: [1.0]
    with pytest.raises(ValueError):
        wrong_length.minimizer(0, (1, 1, 0), [0.0, 0.0])
    with pytest.raises(ValueError):
        constant_model(g=-1.0).tables
    with pytest.raises(ValueError):
        constant_model(T=0.0)


def test_table_forms_match_pointwise_operations():
    model = mixed_model()
    rng = np.random.default_rng(3)
    v = rng.normal(size=(model.d, model.space.size))
    alpha = rng.uniform(0, 2, size=(model.d, model.space.size, model.d - 1))
    beta = rng.uniform(0, 2, size=(model.d, model.space.size, model.d - 1))
    simplex = model.space.simplex
    v_slice = lambda x, mu: v[x, simplex.rank(mu)]
    alpha_at = lambda x, mu: alpha[x, simplex.rank(mu)]
    beta_at = lambda x, mu: beta[x, simplex.rank(mu)]

    p = model.differences(v)
    ham = model.hamiltonian_table(p)
    tagged = model.tagged_term(v, alpha)
    population = model.population_term(v, beta)
    minimizer = model.minimizer_table(p)
    for i, mu in enumerate(simplex):
        for x in range(model.d):
            assert np.allclose(p[x, i], delta_x(v_slice, x, mu))
            assert np.allclose(minimizer[x, i], model.minimizer(x, mu, p[x, i]))
            assert ham[x, i] == pytest.approx(model.hamiltonian(x, mu, p[x, i]))
            assert tagged[x, i] == pytest.approx(model.tagged_generator(v_slice, alpha_at, x, mu))
            assert population[x, i] == pytest.approx(
                model.population_generator(v_slice, beta_at, x, mu)
            )


def test_custom_cost_table_path():
    cost = CustomCost(
        running=lambda x, mu, a: (a * a).sum(-1) + 0.1,
        minimizer=lambda x, mu, p, lam1: np.maximum(0.0, -lam1 * p / 2.0),
        gamma=2.0,
    )
    model = GameModel(
        d=2, N=2, T=1.0,
        lambda0=lambda x, mu: [0.2],
        lambda1=lambda x, mu: [1.0],
        cost=cost,
        terminal=lambda x, mu: float(x),
    )
    v = np.array([[0.0, 1.0, 2.0], [3.0, 1.0, 0.0]])
    p = model.differences(v)
    ham = model.hamiltonian_table(p)
    for i, mu in enumerate(model.space.simplex):
        for x in range(2):
            assert ham[x, i] == pytest.approx(model.hamiltonian(x, mu, p[x, i]))
    assert model.cost.state_cost(0, (1, 1)) == pytest.approx(0.1)
    with pytest.raises(ValueError):
        CustomCost(cost.running, cost.minimizer, gamma=0.0)


vectors = st.lists(st.floats(-20, 20), min_size=2, max_size=2)


@given(vectors, vectors, st.integers(0, 2), st.integers(0, 9))
@settings(max_examples=200, deadline=None)
def test_hamiltonian_envelope_and_concavity(p, q, x, mu_index):
    model = mixed_model()
    mu = model.space.counts(mu_index)
    p, q = np.array(p), np.array(q)
    a_star = model.minimizer(x, mu, p)
    h = model.hamiltonian(x, mu, p)
    assert h == pytest.approx(model.pre_hamiltonian(x, mu, p, a_star), abs=1e-12)
    for a in (np.abs(q), np.zeros(2), a_star + 0.5):
        assert h <= model.pre_hamiltonian(x, mu, p, a) + 1e-9
    midpoint = model.hamiltonian(x, mu, (p + q) / 2)
    assert midpoint >= 0.5 * (h + model.hamiltonian(x, mu, q)) - 1e-9


@given(vectors, vectors, st.integers(0, 2), st.integers(0, 9))
@settings(max_examples=200, deadline=None)
def test_minimizer_is_lipschitz(p, q, x, mu_index):
    model = mixed_model()
    mu = model.space.counts(mu_index)
    p, q = np.array(p), np.array(q)
    lam1_max = float(np.max(model.tables.lam1))
    gap = np.linalg.norm(model.minimizer(x, mu, p) - model.minimizer(x, mu, q))
    assert gap <= lam1_max * np.linalg.norm(p - q) + 1e-12


def test_kuramoto2_running_cost():
    model = make_kuramoto2(N=4, kappa=6.0, sigma2=0.5)
    assert model.running_cost(0, (0, 4), np.zeros(1)) == pytest.approx(6.0)
    assert model.running_cost(1, (0, 4), np.array([2.0])) == pytest.approx(2.0)
    assert list(model.lambda0_at(0, 0)) == [0.5]


def test_differences_shape_and_values():
    model = mixed_model()
    v = np.arange(model.d * model.space.size, dtype=float).reshape(model.d, -1)
    p = model.differences(v)
    assert p.shape == (model.d, model.space.size, model.d - 1)
    assert np.allclose(p[1, :, 0], v[0] - v[1])
    assert np.allclose(p[1, :, 1], v[2] - v[1])
    stacked = model.differences(np.stack([v, 2 * v]))
    assert np.allclose(stacked[1], 2 * p)


def test_shift_matches_population_index():
    model = mixed_model()
    for i, mu in enumerate(model.space.simplex):
        for z in range(3):
            for y in range(3):
                if mu[z] == 0:
                    continue
                assert model.space.move_index[z, y, i] == model.space.simplex.rank(shift(mu, y, z))


def test_table_cap_switches_lookups_only():
    calls = []

    def lam0(x, mu):
        calls.append((x, mu))
        return np.full(1, 0.5)

    model = GameModel(
        d=2,
        N=3,
        T=1.0,
        lambda0=lam0,
        lambda1=lambda x, mu: np.ones(1),
        cost=QuadraticCost(lambda x, mu: 0.0),
        terminal=lambda x, mu: 0.0,
        table_cap=0,
    )
    assert not model.memoized
    assert list(model.lambda0_at(1, 2)) == [0.5]
    assert calls == [(1, model.space.counts(2))]
    assert "tables" not in vars(model)
    model.compute_bounds()
    assert "tables" in vars(model)
    assert model.tables.lam0.shape == (2, model.space.size, 1)
    model.lambda0_at(0, 1)
    assert calls[-1] == (0, model.space.counts(1))

    cached = constant_model(N=3)
    assert cached.memoized
    cached.lambda0_at(0, 0)
    assert "tables" in vars(cached)
