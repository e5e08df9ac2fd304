"""Macroscopic moment equations for the two interaction models.

The state is integrated as node masses ``rho`` and first moments
``mom = rho * m``.  The node means ``m`` are only reported, since
``mom / rho`` is singular once a node empties.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatch, WrongVariant
from .graph import TransitionMatrix

MEAN_FLOOR = 1e-12


class Variant(str, enum.Enum):
    EXCHANGE = "exchange"
    INFECTION_HEALING = "infection-healing"


def _vec(x, n, name):
    a = np.asarray(x, dtype=float)
    a = np.full(n, float(a)) if a.ndim == 0 else a.copy()
    if a.shape != (n,):
        raise DimensionMismatch(f"{name} must have length {n}, got shape {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Rates and exchange coefficients.

    ``mu`` is consulted only by the exchange model; ``sigma`` and ``gamma``
    only by the infection-healing model.
    """

    variant: Variant
    nu1: np.ndarray
    nu2: np.ndarray
    chi: float
    mu: float = 0.0
    sigma: float = 0.0
    gamma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        nu1 = np.atleast_1d(np.asarray(self.nu1, dtype=float))
        n = max(nu1.size, np.atleast_1d(self.nu2).size)
        object.__setattr__(self, "nu1", _vec(self.nu1, n, "nu1"))
        object.__setattr__(self, "nu2", _vec(self.nu2, n, "nu2"))
        for name in ("nu1", "nu2"):
            v = getattr(self, name)
            if np.any(v < 0) or np.any(v > 1):
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        for name in ("chi", "mu", "sigma", "gamma"):
            value = float(getattr(self, name))
            if not value >= 0:
                raise ValueError(f"{name} must be >= 0, got {value}")
            object.__setattr__(self, name, value)

    @property
    def n(self) -> int:
        return self.nu1.size

    @property
    def interaction_rate(self) -> float:
        return self.mu if self.variant is Variant.EXCHANGE else self.sigma

    @classmethod
    def exchange(cls, nu1, nu2, chi, mu, n=None):
        if n is not None:
            nu1, nu2 = _vec(nu1, n, "nu1"), _vec(nu2, n, "nu2")
        return cls(Variant.EXCHANGE, nu1, nu2, chi, mu=mu)

    @classmethod
    def infection_healing(cls, nu1, nu2, chi, sigma, gamma, n=None):
        if n is not None:
            nu1, nu2 = _vec(nu1, n, "nu1"), _vec(nu2, n, "nu2")
        return cls(Variant.INFECTION_HEALING, nu1, nu2, chi, sigma=sigma, gamma=gamma)

    def replace(self, **changes) -> "ModelParams":
        kw = dict(variant=self.variant, nu1=self.nu1, nu2=self.nu2, chi=self.chi,
                  mu=self.mu, sigma=self.sigma, gamma=self.gamma)
        kw.update(changes)
        return ModelParams(**kw)

    def require(self, variant: Variant):
        if self.variant is not variant:
            raise WrongVariant(f"operation needs the {variant.value} model, got {self.variant.value}")


@dataclass(frozen=True, eq=False)
class MacroState:
    rho: np.ndarray
    mom: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        rho = np.array(self.rho, dtype=float, ndmin=1)
        mom = np.array(self.mom, dtype=float, ndmin=1)
        if rho.shape != mom.shape or rho.ndim != 1:
            raise DimensionMismatch(f"rho and mom shapes differ: {rho.shape} vs {mom.shape}")
        rho.setflags(write=False)
        mom.setflags(write=False)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "mom", mom)
        object.__setattr__(self, "t", float(self.t))

    @classmethod
    def from_means(cls, rho, m, t=0.0):
        rho = np.asarray(rho, dtype=float)
        return cls(rho, rho * np.asarray(m, dtype=float), t)

    @property
    def n(self) -> int:
        return self.rho.size

    def check(self):
        if np.any(self.rho < 0) or np.any(self.mom < 0):
            raise ValueError("state has negative components")
        return self


def _check_dims(state: MacroState, P_eff: TransitionMatrix):
    if state.n != P_eff.n:
        raise DimensionMismatch(f"state has {state.n} nodes, matrix has {P_eff.n}")


def _control_vec(u, n, name):
    if u is None:
        return np.zeros(n)
    u = np.asarray(u, dtype=float)
    if u.shape != (n,):
        raise DimensionMismatch(f"{name} must have length {n}, got shape {u.shape}")
    return u


def rhs_mass(state: MacroState, P_eff: TransitionMatrix, chi: float) -> np.ndarray:
    """d rho / dt = chi (P_eff - I) rho."""
    _check_dims(state, P_eff)
    return chi * (P_eff.entries @ state.rho - state.rho)


def migration_term(state: MacroState, P_eff: TransitionMatrix, chi: float) -> np.ndarray:
    _check_dims(state, P_eff)
    return chi * (P_eff.entries @ state.mom - state.mom)


def exchange_interaction_term(state: MacroState, params: ModelParams, u_mu=None) -> np.ndarray:
    params.require(Variant.EXCHANGE)
    u = _control_vec(u_mu, state.n, "u_mu")
    return params.mu * (1.0 - u) * (params.nu2 - params.nu1) * state.rho * state.mom


def infection_healing_term(state: MacroState, params: ModelParams, u_sigma=None) -> np.ndarray:
    params.require(Variant.INFECTION_HEALING)
    u = _control_vec(u_sigma, state.n, "u_sigma")
    return (params.sigma * (1.0 - u) * params.nu2 * state.rho - params.gamma * params.nu1) * state.mom


def rhs_moment_exchange(state, P_eff, params: ModelParams, u_mu=None) -> np.ndarray:
    """First-moment equation of the exchange model.

    ``chi (P_eff mom - mom) + mu (1 - u_mu) (nu2 - nu1) rho mom``; the
    quadratic term is evaluated as ``rho * mom`` so the mean is never formed.
    """
    params.require(Variant.EXCHANGE)
    return migration_term(state, P_eff, params.chi) + exchange_interaction_term(state, params, u_mu)


def rhs_moment_infection_healing(state, P_eff, params: ModelParams, u_sigma=None) -> np.ndarray:
    """``chi (P_eff mom - mom) + sigma (1 - u_sigma) nu2 rho mom - gamma nu1 mom``."""
    params.require(Variant.INFECTION_HEALING)
    return migration_term(state, P_eff, params.chi) + infection_healing_term(state, params, u_sigma)


def rhs_moment(state, P_eff, params: ModelParams, u_interaction=None) -> np.ndarray:
    if params.variant is Variant.EXCHANGE:
        return rhs_moment_exchange(state, P_eff, params, u_interaction)
    return rhs_moment_infection_healing(state, P_eff, params, u_interaction)


def derived_means(state: MacroState, mean_floor: float = MEAN_FLOOR):
    """Node means ``mom / rho`` and a validity mask.

    Entries where ``rho < mean_floor`` are ``nan`` and masked out.
    """
    rho, mom = np.asarray(state.rho), np.asarray(state.mom)
    valid = rho >= mean_floor
    m = np.full(rho.shape, np.nan)
    np.divide(mom, rho, out=m, where=valid)
    return m, valid


def bounded_moment_check(times, rho, mom, P_u_seq, chi, alpha, r, t1=None):
    """Check the two-sided integral bound on the migration flux of ``rho m``.

    For each node, evaluates ``I_i(t) = chi * int_{t1}^t ((P^u mom)_i - mom_i) ds``
    by the trapezoid rule on the sampled trajectory and reports whether
    ``-mom_i(t1) < I_i(t) < mom_i(t1) (1/r(t) + alpha_i - 1)`` holds at every
    sample after ``t1``.  ``P_u_seq`` holds one controlled matrix per sample
    (an ``(K, n, n)`` array); ``r`` is a callable.
    """
    times = np.asarray(times, dtype=float)
    mom = np.asarray(mom, dtype=float)
    P_u_seq = np.asarray(P_u_seq, dtype=float)
    alpha = np.broadcast_to(np.asarray(alpha, dtype=float), (mom.shape[1],))
    k0 = 0 if t1 is None else int(np.searchsorted(times, t1))
    flux = chi * (np.einsum("kij,kj->ki", P_u_seq, mom) - mom)
    seg = 0.5 * (flux[k0 + 1:] + flux[k0:-1]) * np.diff(times[k0:])[:, None]
    integral = np.vstack([np.zeros((1, mom.shape[1])), np.cumsum(seg, axis=0)])
    base = mom[k0]
    rt = np.array([r(t) for t in times[k0:]], dtype=float)
    with np.errstate(divide="ignore"):
        upper = base * (1.0 / rt[:, None] + alpha - 1.0)
    lower_ok = np.all(integral[1:] > -base, axis=0)
    upper_ok = np.all(integral[1:] < upper[1:], axis=0)
    return lower_ok & upper_ok
