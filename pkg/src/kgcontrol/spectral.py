"""Critical densities and reproduction-number bounds for the infection-healing model.

Around the disease-free state with masses at the stationary density, the
node means obey ``dm/dt = A m`` with

    A = chi (R^-1 P R - I) + sigma nu2 R - gamma nu1 I,   R = diag(rho_inf).

Writing ``A = B - D`` with ``D = (chi + gamma nu1) I`` gives the
next-generation matrix ``beta = B D^-1``.  Its row sums bracket R0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import ModelParams, Variant
from .errors import HeterogeneousParams, NoConvergence, Reducible, ZeroDenominator
from .graph import StationaryDensity, TransitionMatrix

RHO_FLOOR = 1e-14


@dataclass(frozen=True, eq=False)
class CriticalDensities:
    rho_c: np.ndarray
    infection_free: np.ndarray


@dataclass(frozen=True, eq=False)
class R0Bounds:
    lower: float
    upper: float
    row_sums: np.ndarray


def critical_densities(params: ModelParams) -> CriticalDensities:
    """``rho_c = gamma nu1 / (sigma nu2)``; ``inf`` where the node cannot be infected."""
    params.require(Variant.INFECTION_HEALING)
    denom = params.sigma * params.nu2
    free = denom == 0
    with np.errstate(divide="ignore", invalid="ignore"):
        rho_c = np.where(free, np.inf, params.gamma * params.nu1 / np.where(free, 1.0, denom))
    return CriticalDensities(rho_c, free)


def _rho(rho_inf):
    r = np.asarray(rho_inf.rho_inf if isinstance(rho_inf, StationaryDensity) else rho_inf, dtype=float)
    if np.any(r < RHO_FLOOR):
        raise Reducible("stationary density has a vanishing component; the graph must be irreducible")
    return r


def _constant(params: ModelParams):
    params.require(Variant.INFECTION_HEALING)
    if np.ptp(params.nu1) > 0 or np.ptp(params.nu2) > 0:
        raise HeterogeneousParams("reproduction-number bounds assume node-independent nu1, nu2")
    return float(params.nu1[0]), float(params.nu2[0])


def beta_matrix(P: TransitionMatrix, rho_inf, params: ModelParams) -> np.ndarray:
    """``beta_ij = chi P_ij rho_j / ((chi + gamma nu1) rho_i) + sigma nu2 rho_i delta_ij / (chi + gamma nu1)``."""
    nu1, nu2 = _constant(params)
    rho = _rho(rho_inf)
    d = params.chi + params.gamma * nu1
    if d == 0:
        raise ZeroDenominator("chi + gamma nu1 vanishes")
    beta = params.chi * P.entries * rho[None, :] / (d * rho[:, None])
    beta[np.diag_indices_from(beta)] += params.sigma * nu2 * rho / d
    return beta


def r0_bounds_uncontrolled(P: TransitionMatrix, rho_inf, params: ModelParams) -> R0Bounds:
    rows = beta_matrix(P, rho_inf, params).sum(axis=1)
    return R0Bounds(float(rows.min()), float(rows.max()), rows)


def r0_bounds_controlled(P: TransitionMatrix, rho_inf, params: ModelParams, u_chi_inf, u_sigma_inf) -> R0Bounds:
    """Bracket from the per-node quotients
    ``(chi (1-u_chi) + sigma (1-u_sigma) nu2 rho_i) / (chi (1-u_chi) + gamma nu1)``."""
    nu1, nu2 = _constant(params)
    rho = _rho(rho_inf)
    uc = np.broadcast_to(np.asarray(u_chi_inf, dtype=float), rho.shape)
    us = np.broadcast_to(np.asarray(u_sigma_inf, dtype=float), rho.shape)
    mob = params.chi * (1.0 - uc)
    den = mob + params.gamma * nu1
    if np.any(den == 0):
        raise ZeroDenominator(f"vanishing denominator at nodes {list(np.flatnonzero(den == 0) + 1)}")
    q = (mob + params.sigma * (1.0 - us) * nu2 * rho) / den
    return R0Bounds(float(q.min()), float(q.max()), q)


def linearized_matrix(P: TransitionMatrix, rho_inf, params: ModelParams) -> np.ndarray:
    """Jacobian of the node means at the disease-free equilibrium."""
    params.require(Variant.INFECTION_HEALING)
    rho = _rho(rho_inf)
    A = params.chi * P.entries * rho[None, :] / rho[:, None]
    A[np.diag_indices_from(A)] += -params.chi + params.sigma * params.nu2 * rho - params.gamma * params.nu1
    return A


def perron_root(M, tol: float = 1e-12, max_iter: int = 100_000) -> float:
    """Dominant eigenvalue of a nonnegative irreducible matrix by power iteration."""
    M = np.asarray(M, dtype=float)
    # the lazy shift removes periodicity without moving the eigenvector
    shift = float(np.abs(M).max()) or 1.0
    L = M + shift * np.eye(M.shape[0])
    x = np.full(M.shape[0], 1.0 / M.shape[0])
    lam = 0.0
    for _ in range(max_iter):
        y = L @ x
        lam_new = float(y.sum() / x.sum())
        y /= y.sum()
        if np.abs(y - x).max() < tol and abs(lam_new - lam) < tol * max(1.0, abs(lam_new)):
            return lam_new - shift
        x, lam = y, lam_new
    raise NoConvergence(f"power iteration did not converge in {max_iter} iterations")


def growth_rate(P: TransitionMatrix, rho_inf, params: ModelParams) -> float:
    """Largest eigenvalue of the linearized matrix (a Metzler matrix)."""
    A = linearized_matrix(P, rho_inf, params)
    s = max(0.0, -float(np.diag(A).min()))
    return perron_root(A + s * np.eye(A.shape[0])) - s


def r0_spectral(P: TransitionMatrix, rho_inf, params: ModelParams) -> float:
    """Spectral radius of the next-generation matrix, bracketed by its row sums."""
    return perron_root(beta_matrix(P, rho_inf, params))
