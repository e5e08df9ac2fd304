import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kgcontrol.control import ControlPolicy
from kgcontrol.dynamics import MacroState, ModelParams
from kgcontrol.errors import StepTooLarge, WrongVariant
from kgcontrol.graph import validate_transition
from kgcontrol.integrate import simulate
from kgcontrol.mc import (
    MAX_STEP_PROBABILITY,
    ParticleEnsemble,
    _pairs,
    moments,
    run_replicas,
    simulate_mc,
    step_exchange,
    step_infection_healing,
    step_migration,
)


def ensemble(nodes, loads, n, seed=0):
    return ParticleEnsemble(np.asarray(nodes), np.asarray(loads, dtype=float), n, np.random.default_rng(seed))


def test_moments_single_node():
    est = moments(ensemble([0] * 10, [2.0] * 10, 3))
    np.testing.assert_array_equal(est.state.rho, [1.0, 0.0, 0.0])
    assert est.m[0] == 2.0
    assert np.isnan(est.m[1])


def test_moments_two_agents():
    est = moments(ensemble([0, 0], [0.0, 4.0], 1))
    assert est.m[0] == 2.0
    assert est.state.mom[0] == 2.0
    # sample sd of {0, 4} is 2*sqrt(2); over sqrt(2)
    assert est.se_m[0] == pytest.approx(2.0)


def test_from_state_largest_remainder(y0):
    ens = ParticleEnsemble.from_state(y0, 1001, seed=1)
    c = ens.counts()
    assert c.sum() == 1001
    assert np.all(np.abs(c - 1001 * y0.rho) < 1)
    est = moments(ens)
    np.testing.assert_allclose(est.m, y0.mom / y0.rho)


def test_migration_zero_chi_or_identity(P1):
    ens = ensemble(np.arange(1000) % 5, np.ones(1000), 5)
    before = ens.nodes.copy()
    step_migration(ens, P1, 0.0, 0.05)
    np.testing.assert_array_equal(ens.nodes, before)
    step_migration(ens, validate_transition(np.eye(5)), 1.0, 0.05)
    np.testing.assert_array_equal(ens.nodes, before)


def test_migration_follows_column(P1):
    N = 200_000
    ens = ensemble(np.zeros(N, dtype=int), np.ones(N), 5, seed=3)
    step_migration(ens, P1, 1.0, 0.1)
    frac = ens.counts() / N
    expected = np.r_[0.9, 0.0, 0.0, 0.0, 0.0] + 0.1 * P1.entries[:, 0]
    se = np.sqrt(expected * (1 - expected) / N)
    assert np.all(np.abs(frac - expected) <= 4 * se + 1e-12)


def test_migration_step_guard(P1):
    ens = ensemble([0, 1], [1.0, 1.0], 5)
    with pytest.raises(StepTooLarge):
        step_migration(ens, P1, 1.0, MAX_STEP_PROBABILITY * 2)


def test_exchange_conserves_load_when_coefficients_match():
    params = ModelParams.exchange(0.3, 0.3, chi=0.0, mu=1.0, n=2)
    rng = np.random.default_rng(5)
    ens = ensemble(rng.integers(0, 2, 5001), rng.random(5001) * 10, 2, seed=5)
    total = ens.loads.sum()
    for _ in range(50):
        step_exchange(ens, params, np.zeros(2), 0.1)
    assert ens.loads.sum() == pytest.approx(total, rel=1e-12)


def test_pairs_are_disjoint_within_nodes():
    rng = np.random.default_rng(8)
    ens = ensemble(rng.integers(0, 3, 999), np.ones(999), 3, seed=8)
    a, b = _pairs(ens, np.full(3, 0.3))
    both = np.r_[a, b]
    assert np.unique(both).size == both.size
    np.testing.assert_array_equal(ens.nodes[a], ens.nodes[b])


def test_exchange_full_control_blocks_interactions():
    params = ModelParams.exchange(0.25, 0.8, chi=0.0, mu=1.0, n=2)
    ens = ensemble(np.arange(1000) % 2, np.linspace(0, 5, 1000), 2)
    before = ens.loads.copy()
    step_exchange(ens, params, np.ones(2), 0.1)
    np.testing.assert_array_equal(ens.loads, before)


def test_exchange_wrong_variant(healing):
    with pytest.raises(WrongVariant):
        step_exchange(ensemble([0], [1.0], 5), healing, np.zeros(5), 0.01)


def test_exchange_step_guard():
    params = ModelParams.exchange(0.25, 0.8, chi=0.0, mu=5.0, n=1)
    with pytest.raises(StepTooLarge):
        step_exchange(ensemble([0, 0], [1.0, 1.0], 1), params, np.zeros(1), 0.1)


def test_exchange_noise_bound():
    params = ModelParams.exchange(0.5, 0.5, chi=0.0, mu=1.0, n=1)
    with pytest.raises(ValueError):
        step_exchange(ensemble([0, 0], [1.0, 1.0], 1), params, np.zeros(1), 0.01, noise_c=0.6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.0, 0.5))
def test_exchange_loads_stay_nonnegative(seed, c):
    params = ModelParams.exchange(0.5, 0.9, chi=0.0, mu=1.0, n=2)
    rng = np.random.default_rng(seed)
    ens = ensemble(rng.integers(0, 2, 300), rng.random(300), 2, seed=seed)
    for _ in range(10):
        step_exchange(ens, params, np.zeros(2), 0.1, noise_c=c)
    assert np.all(ens.loads >= 0)


def test_exchange_drift_matches_interaction_term():
    # one node, drift of the mean per unit time is mu (nu2 - nu1) rho m
    params = ModelParams.exchange(0.25, 0.8, chi=0.0, mu=1.0, n=1)
    N, dt = 200_000, 0.05
    ens = ensemble(np.zeros(N, dtype=int), np.full(N, 2.0), 1, seed=11)
    step_exchange(ens, params, np.zeros(1), dt)
    m1 = moments(ens)
    drift = (m1.m[0] - 2.0) / dt
    expected = 1.0 * (0.8 - 0.25) * 1.0 * 2.0
    assert abs(drift - expected) <= 3 * m1.se_m[0] / dt


def test_infection_without_healing_is_monotone():
    params = ModelParams.infection_healing(0.5, 0.9, chi=0.0, sigma=1.0, gamma=0.0, n=2)
    rng = np.random.default_rng(2)
    ens = ensemble(rng.integers(0, 2, 2000), rng.random(2000), 2, seed=2)
    for _ in range(20):
        before = ens.loads.copy()
        step_infection_healing(ens, params, np.zeros(2), 0.05)
        assert np.all(ens.loads >= before)


def test_full_healing_clears_loads():
    params = ModelParams.infection_healing(1.0, 0.9, chi=0.0, sigma=0.0, gamma=1.0, n=1)
    ens = ensemble(np.zeros(500, dtype=int), np.ones(500), 1, seed=4)
    for _ in range(2000):
        step_infection_healing(ens, params, np.zeros(1), 0.1)
    assert np.all(ens.loads == 0)


def test_healing_step_guard():
    params = ModelParams.infection_healing(0.5, 0.9, chi=0.0, sigma=0.0, gamma=3.0, n=1)
    with pytest.raises(StepTooLarge):
        step_infection_healing(ensemble([0, 0], [1.0, 1.0], 1), params, np.zeros(1), 0.1)


def test_seed_determinism(P1, y0, exchange):
    kw = dict(N=2000, t_end=1.0, dt=0.02)
    a = simulate_mc(P1, exchange, ControlPolicy(), y0, seed=9, **kw)
    b = simulate_mc(P1, exchange, ControlPolicy(), y0, seed=9, **kw)
    c = simulate_mc(P1, exchange, ControlPolicy(), y0, seed=10, **kw)
    assert a.to_csv() == b.to_csv()
    assert a.to_csv() != c.to_csv()


def test_csv_has_error_columns(P1, y0, exchange):
    traj = simulate_mc(P1, exchange, ControlPolicy(), y0, N=500, t_end=0.2, dt=0.02, seed=1)
    header = traj.to_csv().splitlines()[0].split(",")
    assert header[0] == "t"
    assert header[-10:] == [f"se_rho_{i}" for i in range(1, 6)] + [f"se_mom_{i}" for i in range(1, 6)]


def test_mc_tracks_ode(P1, y0, exchange):
    policy = ControlPolicy(mobility="feedback", interaction="feedback")
    ode = simulate(P1, exchange, policy, y0, t_end=2.0, dt=0.01, record_every=20)
    mc = simulate_mc(P1, exchange, policy, y0, N=40_000, t_end=2.0, dt=0.01, seed=7, record_every=20)
    np.testing.assert_allclose(mc.times, ode.times)
    z_rho = np.abs(mc.rho - ode.rho)[1:] / mc.se_rho[1:]
    z_mom = np.abs(mc.mom - ode.mom)[1:] / mc.se_mom[1:]
    assert np.median(z_rho) < 1.5 and np.median(z_mom) < 1.5
    assert z_rho.max() < 5 and z_mom.max() < 5


def test_replicas_are_independent_and_reproducible(P1, y0, exchange):
    kw = dict(P=P1, params=exchange, policy=ControlPolicy(), y0=y0, N=300, t_end=0.1, dt=0.02)
    r1 = run_replicas(2, seed=3, workers=1, **kw)
    r2 = run_replicas(2, seed=3, workers=1, **kw)
    assert [r.to_csv() for r in r1] == [r.to_csv() for r in r2]
    assert r1[0].to_csv() != r1[1].to_csv()


def test_ensemble_rejects_bad_labels():
    with pytest.raises(ValueError):
        ensemble([0, 3], [1.0, 1.0], 3)
    with pytest.raises(ValueError):
        ensemble([0], [-1.0], 1)


def test_from_state_uses_total_mass():
    state = MacroState.from_means([2.0, 2.0], [1.0, 3.0])
    est = moments(ParticleEnsemble.from_state(state, 100, seed=0))
    np.testing.assert_allclose(est.state.rho, [2.0, 2.0])
    np.testing.assert_allclose(est.state.mom, [2.0, 6.0])


def test_update_rate_is_unbiased_in_small_nodes():
    # about one selected agent per step, where odd leftovers matter most
    params = ModelParams.infection_healing(0.5, 0.5, chi=0.0, sigma=1.0, gamma=0.0, n=1)
    n, dt, steps = 20, 0.05, 4000
    ens = ensemble(np.zeros(n, dtype=int), np.ones(n), 1, seed=21)
    updated = 0
    for _ in range(steps):
        ens.loads[:] = 1.0
        step_infection_healing(ens, params, np.zeros(1), dt)
        updated += int(np.count_nonzero(ens.loads != 1.0))
    expected = steps * n * dt
    assert abs(updated - expected) < 4 * np.sqrt(expected)
