import warnings

import numpy as np
import pytest

from kgcontrol import _kernels as K
from kgcontrol.control import ControlPolicy, Controller
from kgcontrol.dynamics import MacroState, ModelParams
from kgcontrol.errors import NegativeStateBlowup, NonFiniteState, StepSizeTooLarge, TrajectoryTooShort
from kgcontrol.graph import stationary_density, validate_transition
from kgcontrol.integrate import Trajectory, Verdict, convergence_report, integrate, simulate


def _quiet(*args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return simulate(*args, **kw)


def test_mass_converges_to_stationary(P1, y0, exchange):
    tr = simulate(P1, exchange, ControlPolicy(), y0, 200.0)
    np.testing.assert_allclose(tr.rho[-1], stationary_density(P1).rho_inf, atol=1e-6)


def test_equal_exchange_means_relax_to_total_moment(P1, y0):
    p = ModelParams.exchange(0.5, 0.5, 1.0, 1.0, n=5)
    tr = simulate(P1, p, ControlPolicy(), y0, 200.0)
    target = float(np.dot([0.35, 0.1, 0.3, 0.05, 0.2], [2, 4, 0.1, 1, 1.5]))
    assert target == pytest.approx(1.48, abs=1e-15)
    np.testing.assert_allclose(tr.means()[-1], target, atol=1e-3)
    assert np.abs(tr.total_mom - tr.total_mom[0]).max() < 1e-8


def test_against_scipy(P1, y0, exchange):
    from scipy.integrate import solve_ivp
    a, dnu = P1.entries, exchange.nu2 - exchange.nu1

    def f(t, y):
        r, w = y[:5], y[5:]
        return np.r_[a @ r - r, a @ w - w + dnu * r * w]

    ref = solve_ivp(f, (0, 20), np.r_[y0.rho, y0.mom], rtol=1e-12, atol=1e-14).y[:, -1]
    tr = simulate(P1, exchange, ControlPolicy(), y0, 20.0)
    np.testing.assert_allclose(np.r_[tr.rho[-1], tr.mom[-1]], ref, rtol=1e-9)


def test_fourth_order(P1, y0, exchange):
    ys = [_quiet(P1, exchange, ControlPolicy(), y0, 10.0, dt, 1).final for dt in (0.1, 0.05, 0.025)]
    e = [np.abs(np.r_[a.rho - b.rho, a.mom - b.mom]).max() for a, b in zip(ys, ys[1:])]
    assert 14 < e[0] / e[1] < 19


def test_invariants(P1, y0, exchange):
    tr = simulate(P1, exchange, ControlPolicy(mobility="feedback", interaction="feedback"), y0, 100.0)
    assert tr.mass_drift < 1e-9
    assert np.all(np.diff(tr.times) > 0)
    assert tr.times[-1] == 100.0
    assert len(tr) == tr.rho.shape[0] == tr.u_chi.shape[0]
    assert tr.min_component.min() >= 0
    p = ModelParams.exchange(0.6, 0.2, 1.0, 1.0, n=5)
    tr = simulate(P1, p, ControlPolicy(), y0, 50.0)
    assert np.all(np.diff(tr.total_mom) <= 0)


def test_odd_horizon_lands_exactly(P1, y0, exchange):
    tr = _quiet(P1, exchange, ControlPolicy(), y0, 1.234, dt=0.1, record_every=5)
    assert tr.times[-1] == pytest.approx(1.234, abs=1e-14)
    assert tr.steps == 13


def test_blowup_errors(P1, y0):
    p = ModelParams.exchange(0.0, 1.0, 1.0, 1.0, n=5)
    with pytest.raises(NonFiniteState):
        _quiet(P1, p.replace(mu=1e3), ControlPolicy(), MacroState(y0.rho, y0.mom * 1e3), 50.0, 0.1)
    heal = ModelParams.infection_healing(1.0, 0.0, 1.0, 0.0, 50.0, n=5)
    with pytest.raises(NegativeStateBlowup):
        _quiet(P1, heal, ControlPolicy(), y0, 1.0, 0.2)


def test_mass_drift_status(monkeypatch, P1, y0, exchange):
    real = K.rk4_run

    def fake(*a):
        out = real(*a)
        return (K.MASS_DRIFT, 3) + out[2:]

    monkeypatch.setattr(K, "rk4_run", fake)
    with pytest.raises(StepSizeTooLarge):
        simulate(P1, exchange, ControlPolicy(), y0, 1.0)


def test_stiffness_warning(P1, y0, exchange):
    with pytest.warns(RuntimeWarning, match="dt="):
        simulate(P1, exchange.replace(mu=100.0), ControlPolicy(), y0, 0.1, dt=0.01)


def test_bad_arguments(P1, y0, exchange):
    c = Controller(P1, exchange, ControlPolicy(), y0)
    with pytest.raises(ValueError):
        integrate(c, y0, 10.0, dt=0.0)
    with pytest.raises(ValueError):
        integrate(c, y0, -1.0)
    with pytest.raises(ValueError):
        integrate(c, MacroState([1.0], [1.0]), 1.0)


def test_csv_schema(P1, exchange):
    y0 = MacroState([0.5, 0.3, 0.2, 0.0, 0.0], [1.0, 0.3, 0.2, 0.0, 0.0])
    P = validate_transition(np.eye(5))
    tr = simulate(P, exchange, ControlPolicy(), y0, 0.1, record_every=5)
    lines = tr.to_csv().splitlines()
    header = lines[0].split(",")
    assert header[:2] == ["t", "rho_1"] and header[-2:] == ["total_mass", "total_mom"]
    assert len(header) == 1 + 5 * 5 + 2
    row = lines[1].split(",")
    m4 = header.index("m_4")
    assert row[m4] == "" and row[header.index("m_1")] == "2.0"
    assert len(lines) == 1 + len(tr)


def _synthetic(values, t_end=10.0):
    t = np.linspace(0, t_end, 101)
    m = np.column_stack([v(t) for v in values])
    rho = np.ones_like(m)
    z = np.zeros_like(m)
    return Trajectory(t, rho, m, z, z, 0.1, 100)


def test_convergence_report_classes():
    tr = _synthetic([
        lambda t: np.full_like(t, 2.0),
        lambda t: np.full_like(t, 1e-9),
        lambda t: np.exp(0.5 * t),
        lambda t: 2 + np.sin(5 * t),
        lambda t: np.exp(-0.8 * t),
    ])
    v = [r.verdict for r in convergence_report(tr, window=4.0, tol=1e-3)]
    assert v == [Verdict.CONVERGED_TO_VALUE, Verdict.CONVERGED_TO_ZERO, Verdict.GROWING,
                 Verdict.OSCILLATING, Verdict.CONVERGED_TO_ZERO]
    with pytest.raises(TrajectoryTooShort):
        convergence_report(tr, window=6.0)
