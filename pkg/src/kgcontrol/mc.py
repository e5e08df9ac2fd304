"""Monte Carlo particle simulation of the kinetic model.

Each of ``N`` agents carries a node label and a nonnegative load.  One time
step applies, in order, migration, binary interactions and (for the
infection-healing model) healing.  Binary interactions use a Nanbu-type
splitting: an agent in node ``i`` interacts during ``dt`` with probability
``rate * (1 - u_i) * rho_i * dt``, where ``rho_i`` is the empirical mass of
the node, so the collision frequency scales with local density as in the
quadratic collision operator.  Selected agents are paired at random within
their node, so nobody interacts twice in one step.  An odd leftover pairs
with an unselected node mate half of the time, which keeps the expected
number of updates per step unbiased.
"""

from __future__ import annotations

import csv
import io
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .control import ControlPolicy, Controller
from .dynamics import MacroState, ModelParams, Variant
from .errors import DimensionMismatch, StepTooLarge
from .graph import TransitionMatrix, controlled_matrix

log = logging.getLogger(__name__)

MAX_STEP_PROBABILITY = 0.1


@dataclass(eq=False)
class ParticleEnsemble:
    """Agent states.  ``nodes`` are 0-based labels; ``rng`` drives every draw."""

    nodes: np.ndarray
    loads: np.ndarray
    n_nodes: int
    rng: np.random.Generator
    total_mass: float = 1.0

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.int64)
        self.loads = np.asarray(self.loads, dtype=float)
        if self.nodes.shape != self.loads.shape:
            raise DimensionMismatch("nodes and loads must have the same length")
        if self.nodes.size and (self.nodes.min() < 0 or self.nodes.max() >= self.n_nodes):
            raise ValueError("node label out of range")
        if np.any(self.loads < 0):
            raise ValueError("loads must be nonnegative")

    @property
    def N(self) -> int:
        return self.nodes.size

    @classmethod
    def from_state(cls, state: MacroState, N: int, seed=None) -> "ParticleEnsemble":
        """Place ``N`` agents by largest-remainder rounding of ``rho``; every agent
        of node ``i`` starts with load ``m_i``."""
        rho = np.asarray(state.rho, dtype=float)
        mass = float(rho.sum())
        share = rho / mass * N
        counts = np.floor(share).astype(np.int64)
        short = N - counts.sum()
        if short:
            counts[np.argsort(-(share - counts), kind="stable")[:short]] += 1
        m = np.divide(state.mom, rho, out=np.zeros_like(rho), where=rho > 0)
        nodes = np.repeat(np.arange(rho.size), counts)
        return cls(nodes, m[nodes], rho.size, np.random.default_rng(seed), mass)

    def counts(self) -> np.ndarray:
        return np.bincount(self.nodes, minlength=self.n_nodes)


@dataclass(frozen=True, eq=False)
class MomentEstimate:
    state: MacroState
    se_rho: np.ndarray
    se_mom: np.ndarray
    m: np.ndarray
    se_m: np.ndarray


def moments(ens: ParticleEnsemble, t: float = 0.0) -> MomentEstimate:
    """Empirical masses, first moments and means with standard errors.

    ``se_rho`` is the binomial error, ``se_mom`` the error of the sample mean
    of ``v * 1{node = i}`` over all agents, and ``se_m`` the within-node
    standard deviation over ``sqrt(n_i)``.
    """
    n, N, w = ens.n_nodes, ens.N, ens.total_mass
    c = ens.counts()
    s1 = np.bincount(ens.nodes, weights=ens.loads, minlength=n)
    s2 = np.bincount(ens.nodes, weights=ens.loads**2, minlength=n)
    p = c / N
    rho = w * p
    mom = w * s1 / N
    se_rho = w * np.sqrt(p * (1 - p) / N)
    var_mom = np.maximum(s2 / N - (s1 / N) ** 2, 0.0)
    se_mom = w * np.sqrt(var_mom / N)
    m = np.full(n, np.nan)
    se_m = np.full(n, np.nan)
    ok = c > 0
    m[ok] = s1[ok] / c[ok]
    ok2 = c > 1
    var_m = np.maximum(s2[ok2] / c[ok2] - m[ok2] ** 2, 0.0) * c[ok2] / (c[ok2] - 1)
    se_m[ok2] = np.sqrt(var_m / c[ok2])
    return MomentEstimate(MacroState(rho, mom, t), se_rho, se_mom, m, se_m)


def _check_probability(p, what):
    pmax = float(np.max(p, initial=0.0))
    if pmax > MAX_STEP_PROBABILITY:
        raise StepTooLarge(f"{what} probability per step {pmax:.3g} exceeds {MAX_STEP_PROBABILITY}; reduce dt")


def _uniform_noise(rng, size, c):
    if c == 0:
        return np.zeros(size)
    return rng.uniform(-c, c, size)


def step_migration(ens: ParticleEnsemble, P_eff: TransitionMatrix, chi: float, dt: float):
    """Each agent jumps with probability ``chi dt`` to a node drawn from its column of ``P_eff``."""
    p = chi * dt
    _check_probability(p, "migration")
    if p == 0 or ens.N == 0:
        return
    movers = np.flatnonzero(ens.rng.random(ens.N) < p)
    if movers.size == 0:
        return
    cum = np.cumsum(P_eff.entries, axis=0)
    src = ens.nodes[movers]
    r = ens.rng.random(movers.size) * cum[-1, src]
    dest = (cum[:, src] <= r[None, :]).sum(axis=0)
    ens.nodes[movers] = np.minimum(dest, ens.n_nodes - 1)


def _pairs(ens: ParticleEnsemble, p_node):
    """Select agents with per-node probability and pair them within nodes.

    Returns index arrays ``a, b`` of disjoint pairs.  A node with an odd
    number of selected agents pairs the leftover, with probability 1/2,
    with a random unselected node mate and otherwise drops it.  Either way
    the expected number of updated agents equals the expected number
    selected, so each agent still updates with probability ``p``.
    """
    rng, nodes = ens.rng, ens.nodes
    counts = ens.counts()
    p_node = np.where(counts >= 2, p_node, 0.0)
    chosen = rng.random(ens.N) < p_node[nodes]
    sel = np.flatnonzero(chosen)
    empty = np.empty(0, dtype=np.int64)
    if sel.size == 0:
        return empty, empty
    sel = sel[np.argsort(nodes[sel] + rng.random(sel.size), kind="stable")]
    g = nodes[sel]
    start = np.flatnonzero(np.r_[True, g[1:] != g[:-1]])
    pos = np.arange(sel.size) - np.repeat(start, np.diff(np.r_[start, sel.size]))
    has_next = np.r_[g[1:] == g[:-1], False]
    head = (pos % 2 == 0) & has_next
    a = [sel[head]]
    b = [sel[np.flatnonzero(head) + 1]]
    for k in sel[(pos % 2 == 0) & ~has_next]:
        if rng.random() < 0.5:
            continue
        free = np.flatnonzero((nodes == nodes[k]) & ~chosen)
        if free.size:
            a.append(np.array([k]))
            b.append(free[rng.integers(free.size)][None])
    return np.concatenate(a), np.concatenate(b)


def _interaction_probability(ens, rate, u, dt):
    rho_hat = ens.total_mass * ens.counts() / max(ens.N, 1)
    p = rate * (1.0 - np.asarray(u, dtype=float)) * rho_hat * dt
    _check_probability(p, "interaction")
    return p


def step_exchange(ens: ParticleEnsemble, params: ModelParams, u_mu, dt: float, noise_c: float = 0.0):
    """Binary exchange ``v' = (1 - nu1 + eta) v + nu2 v*`` inside each node."""
    params.require(Variant.EXCHANGE)
    if noise_c > 1.0 - params.nu1.max() + 1e-15:
        raise ValueError(f"noise amplitude {noise_c} would allow negative loads (max {1 - params.nu1.max():g})")
    p = _interaction_probability(ens, params.mu, u_mu, dt)
    a, b = _pairs(ens, p)
    v = ens.loads
    va, vb = v[a], v[b]
    nu1, nu2, rng = params.nu1, params.nu2, ens.rng
    na = ens.nodes[a]
    v[a] = (1.0 - nu1[na] + _uniform_noise(rng, a.size, noise_c)) * va + nu2[na] * vb
    v[b] = (1.0 - nu1[na] + _uniform_noise(rng, a.size, noise_c)) * vb + nu2[na] * va
    np.maximum(v, 0.0, out=v)


def step_infection_healing(ens: ParticleEnsemble, params: ModelParams, u_sigma, dt: float, noise_c: float = 0.0):
    """Infection ``v' = v + nu2 v* + eta v`` between node mates, then healing
    ``v'' = (1 - nu1 + eta'') v`` with probability ``gamma dt`` per agent."""
    params.require(Variant.INFECTION_HEALING)
    if noise_c > min(1.0, 1.0 - params.nu1.max()) + 1e-15:
        raise ValueError(f"noise amplitude {noise_c} would allow negative loads")
    _check_probability(params.gamma * dt, "healing")
    p = _interaction_probability(ens, params.sigma, u_sigma, dt)
    a, b = _pairs(ens, p)
    v = ens.loads
    va, vb = v[a], v[b]
    nu2, rng = params.nu2, ens.rng
    na = ens.nodes[a]
    v[a] = (1.0 + _uniform_noise(rng, a.size, noise_c)) * va + nu2[na] * vb
    v[b] = (1.0 + _uniform_noise(rng, a.size, noise_c)) * vb + nu2[na] * va
    if params.gamma > 0:
        heal = np.flatnonzero(rng.random(ens.N) < params.gamma * dt)
        nh = ens.nodes[heal]
        v[heal] *= 1.0 - params.nu1[nh] + _uniform_noise(rng, heal.size, noise_c)
    np.maximum(v, 0.0, out=v)


@dataclass(frozen=True, eq=False)
class MCTrajectory:
    times: np.ndarray
    rho: np.ndarray
    mom: np.ndarray
    se_rho: np.ndarray
    se_mom: np.ndarray
    m: np.ndarray
    u_chi: np.ndarray
    u_interaction: np.ndarray
    N: int
    seed: int | None

    def to_csv(self, target=None) -> str:
        n = self.rho.shape[1]
        cols = lambda p: [f"{p}_{i}" for i in range(1, n + 1)]  # noqa: E731
        header = (["t"] + cols("rho") + cols("mom") + cols("m") + cols("uchi") + cols("uint")
                  + ["total_mass", "total_mom"] + cols("se_rho") + cols("se_mom"))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        f = lambda x: repr(float(x))  # noqa: E731
        for k in range(self.times.size):
            w.writerow(
                [f(self.times[k])]
                + [f(x) for x in self.rho[k]]
                + [f(x) for x in self.mom[k]]
                + ["" if np.isnan(x) else f(x) for x in self.m[k]]
                + [f(x) for x in self.u_chi[k]]
                + [f(x) for x in self.u_interaction[k]]
                + [f(self.rho[k].sum()), f(self.mom[k].sum())]
                + [f(x) for x in self.se_rho[k]]
                + [f(x) for x in self.se_mom[k]]
            )
        text = buf.getvalue()
        if target is not None:
            with open(target, "w", newline="") as fh:
                fh.write(text)
        return text


def simulate_mc(
    P: TransitionMatrix,
    params: ModelParams,
    policy: ControlPolicy,
    y0: MacroState,
    N: int,
    t_end: float,
    dt: float = 1e-2,
    seed=None,
    noise_c: float = 0.0,
    record_every: int = 10,
) -> MCTrajectory:
    """Run one ensemble.  Controls are evaluated from the empirical moments at
    the start of every step."""
    if N < 1:
        raise ValueError("N must be positive")
    controller = Controller(P, params, policy, y0)
    ens = ParticleEnsemble.from_state(y0, N, seed)
    nsteps = max(1, int(round(t_end / dt)))
    step = step_exchange if params.variant is Variant.EXCHANGE else step_infection_healing
    rows = []

    def record(t, sig):
        est = moments(ens, t)
        rows.append((t, est.state.rho, est.state.mom, est.se_rho, est.se_mom, est.m, sig.u_chi, sig.u_interaction))

    t = y0.t
    sig = controller.signal(moments(ens, t).state, t)
    record(t, sig)
    for k in range(1, nsteps + 1):
        P_eff = P if not np.any(sig.u_chi) else controlled_matrix(P, sig.u_chi)
        step_migration(ens, P_eff, params.chi, dt)
        step(ens, params, sig.u_interaction, dt, noise_c)
        t = y0.t + k * dt
        sig = controller.signal(moments(ens, t).state, t)
        if k % record_every == 0 or k == nsteps:
            record(t, sig)
    cols = list(zip(*rows))
    return MCTrajectory(np.array(cols[0]), *(np.array(c) for c in cols[1:]), N=N,
                        seed=seed if isinstance(seed, (int, type(None))) else None)


def _replica(args):
    kwargs, seed = args
    return simulate_mc(seed=seed, **kwargs)


def run_replicas(replicas: int, seed: int, workers: int | None = None, **kwargs):
    """Independent ensembles with seeds spawned from ``seed``; runs in a process pool."""
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(replicas)]
    jobs = [(kwargs, s) for s in seeds]
    workers = workers or min(replicas, os.cpu_count() or 1)
    if workers <= 1 or replicas == 1:
        return [_replica(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_replica, jobs))
