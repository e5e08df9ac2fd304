import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgcontrol.dynamics import (
    MacroState,
    ModelParams,
    bounded_moment_check,
    derived_means,
    exchange_interaction_term,
    infection_healing_term,
    rhs_mass,
    rhs_moment,
    rhs_moment_exchange,
    rhs_moment_infection_healing,
)
from kgcontrol.errors import DimensionMismatch, WrongVariant
from kgcontrol.graph import controlled_matrix, stationary_density, validate_transition
from conftest import random_stochastic


def test_rhs_mass_stationary_is_zero(P1):
    rho = stationary_density(P1).rho_inf
    np.testing.assert_allclose(rhs_mass(MacroState(rho, rho), P1, 1.0), 0.0, atol=1e-10)


def test_rhs_mass_no_migration(P1, y0):
    assert np.all(rhs_mass(y0, P1, 0.0) == 0.0)


def test_rhs_mass_five_node(P1, y0):
    out = rhs_mass(y0, P1, 1.0)
    a, r = P1.entries, y0.rho
    ref = [sum(a[i, j] * r[j] for j in range(5)) - r[i] for i in range(5)]
    np.testing.assert_allclose(out, ref, atol=1e-15)
    assert abs(out.sum()) < 1e-14


def test_rhs_mass_dimension_mismatch(P1):
    with pytest.raises(DimensionMismatch):
        rhs_mass(MacroState([0.5, 0.5], [1, 1]), P1, 1.0)


def test_exchange_equal_nu_conserves_total(P1, y0):
    p = ModelParams.exchange(0.5, 0.5, 1.0, 1.0, n=5)
    assert abs(rhs_moment_exchange(y0, P1, p).sum()) < 1e-14


def test_exchange_decay_when_nu1_larger(P1, y0):
    p = ModelParams.exchange(0.6, 0.3, 1.0, 1.0, n=5)
    assert rhs_moment_exchange(y0, P1, p).sum() < 0


def test_exchange_full_control_leaves_migration(P1, y0, exchange):
    out = rhs_moment_exchange(y0, P1, exchange, np.ones(5))
    np.testing.assert_allclose(out, P1.entries @ y0.mom - y0.mom, atol=1e-15)


def test_wrong_variant(P1, y0, exchange, healing):
    with pytest.raises(WrongVariant):
        rhs_moment_exchange(y0, P1, healing)
    with pytest.raises(WrongVariant):
        rhs_moment_infection_healing(y0, P1, exchange)


def test_infection_balance_point(P1, healing):
    # chi = 0 and sigma nu2 rho = gamma nu1 at node 1
    p = healing.replace(chi=0.0)
    rho = np.full(5, 0.2)
    rho[0] = 0.15 / 0.9
    s = MacroState(rho, np.ones(5))
    assert abs(rhs_moment_infection_healing(s, P1, p)[0]) < 1e-15


def test_infection_sign_against_critical_density(P1, healing):
    rho_c = 0.15 / 0.9
    s = MacroState([0.3, 0.1, 0.2, 0.2, 0.2], np.ones(5))
    term = infection_healing_term(s, healing)
    np.testing.assert_array_equal(term > 0, s.rho > rho_c)


def test_strong_infection_control_gives_decay(P1, y0, healing):
    u = np.full(5, 0.9)  # sigma (1-u) nu2 = 0.09 < gamma nu1 = 0.15
    assert rhs_moment_infection_healing(y0, P1, healing, u).sum() < 0


def test_derived_means(y0):
    m, ok = derived_means(MacroState([1.0, 0.0], [2.0, 0.0]))
    assert m[0] == 2.0 and np.isnan(m[1]) and ok.tolist() == [True, False]
    m, _ = derived_means(y0)
    np.testing.assert_allclose(m, [2, 4, 0.1, 1, 1.5], rtol=1e-15)
    m, _ = derived_means(MacroState([0.5, 0.5], [0.0, 0.0]))
    assert np.all(m == 0)


def test_params_validation():
    with pytest.raises(ValueError):
        ModelParams.exchange(1.5, 0.5, 1.0, 1.0, n=2)
    with pytest.raises(ValueError):
        ModelParams.exchange(0.5, 0.5, -1.0, 1.0, n=2)
    with pytest.raises(DimensionMismatch):
        ModelParams.exchange([0.5, 0.5], [0.5, 0.5, 0.5], 1.0, 1.0)


def _random_case(seed, variant):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 7))
    P = validate_transition(random_stochastic(rng, n, 0.3))
    Pu = controlled_matrix(P, rng.random(n))
    s = MacroState(rng.random(n), rng.random(n) * 5)
    u = rng.random(n)
    if variant == "exchange":
        p = ModelParams.exchange(rng.random(n), rng.random(n), rng.random() * 2, rng.random() * 2)
    else:
        p = ModelParams.infection_healing(rng.random(n), rng.random(n), rng.random() * 2, rng.random() * 2, rng.random() * 2)
    return Pu, s, p, u


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_total_moment_identities(seed):
    Pu, s, p, u = _random_case(seed, "exchange")
    assert abs(rhs_mass(s, Pu, p.chi).sum()) < 1e-13
    total = rhs_moment_exchange(s, Pu, p, u).sum()
    ref = p.mu * np.sum((1 - u) * (p.nu2 - p.nu1) * s.rho * s.mom)
    assert abs(total - ref) < 1e-13
    Pu, s, p, u = _random_case(seed, "healing")
    total = rhs_moment_infection_healing(s, Pu, p, u).sum()
    ref = np.sum(s.mom * (p.sigma * (1 - u) * p.nu2 * s.rho - p.gamma * p.nu1))
    assert abs(total - ref) < 1e-13


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_control_scales_interaction_term(seed):
    _, s, p, u = _random_case(seed, "exchange")
    np.testing.assert_allclose(exchange_interaction_term(s, p, u), (1 - u) * exchange_interaction_term(s, p), atol=1e-15)
    _, s, p, u = _random_case(seed, "healing")
    gain = p.sigma * p.nu2 * s.rho * s.mom
    np.testing.assert_allclose(infection_healing_term(s, p, u) + p.gamma * p.nu1 * s.mom, (1 - u) * gain, atol=1e-14)


def test_rhs_moment_dispatch(P1, y0, exchange, healing):
    assert np.array_equal(rhs_moment(y0, P1, exchange), rhs_moment_exchange(y0, P1, exchange))
    assert np.array_equal(rhs_moment(y0, P1, healing), rhs_moment_infection_healing(y0, P1, healing))


def test_bounded_moment_check_on_trajectory(P1, y0):
    from kgcontrol.control import ControlPolicy
    from kgcontrol.integrate import simulate
    p = ModelParams.exchange(0.5, 0.5, 1.0, 1.0, n=5)
    tr = simulate(P1, p, ControlPolicy(), y0, 20.0)
    Pu = np.repeat(P1.entries[None], len(tr), axis=0)
    ok = bounded_moment_check(tr.times, tr.rho, tr.mom, Pu, 1.0, alpha=2.0, r=lambda t: 1.0 + t)
    assert ok.shape == (5,)
    # a too tight upper envelope must be reported as violated for some node
    tight = bounded_moment_check(tr.times, tr.rho, tr.mom, Pu, 1.0, alpha=0.0, r=lambda t: 1e6)
    assert not tight.all()
