"""Instantaneous feedback controls on mobility and in-node interactions.

Each node minimizes ``psi(rho_i m_i) + (k/2) u^2`` over one infinitesimal
step with ``psi(x) = x**q / q``.  The resulting laws are state feedbacks,
clamped to ``[delta, 1]`` for mobility and ``[0, 1]`` for interactions.
"""

from __future__ import annotations

import enum
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .dynamics import MacroState, ModelParams, Variant
from .errors import (
    InvalidCriticalWarning,
    InvalidExponent,
    NonpositivePenalization,
    WrongVariant,
    ZeroChi,
)
from .graph import TransitionMatrix, delta_floor

log = logging.getLogger(__name__)

RELAXED_SCALE = 2.5e-5


class MobilityMode(str, enum.Enum):
    OFF = "off"
    FEEDBACK = "feedback"
    FULL_SUPPRESSION = "full-suppression"


class InteractionMode(str, enum.Enum):
    OFF = "off"
    FEEDBACK = "feedback"
    FEEDBACK_UNTIL = "feedback-until"
    EXPLICIT_LAW = "explicit-law"
    GLOBAL = "global"
    TARGETED = "targeted"


class KSigmaStrategy(str, enum.Enum):
    INTERVAL_LOWER = "interval-lower"
    INTERVAL_UPPER = "interval-upper"


class _Disabled:
    def __repr__(self):
        return "DISABLED_MOBILITY_CONTROL"

    def __bool__(self):
        return False


DISABLED_MOBILITY_CONTROL = _Disabled()


@dataclass(frozen=True)
class ControlPolicy:
    """Which controls act and how their penalizations are chosen.

    ``k_chi`` and ``k_mu`` are ``"minimal"`` (equality in the admissibility
    bound) or a positive constant.  ``k_sigma`` is a :class:`KSigmaStrategy`
    or a positive constant.  ``delta`` is ``"min"``, ``"positive-min"`` or a
    number in ``[0, 1)``.
    """

    q: float = 2.0
    mobility: MobilityMode = MobilityMode.OFF
    interaction: InteractionMode = InteractionMode.OFF
    t_bar: float | None = None
    delta: str | float = "min"
    k_chi: str | float = "minimal"
    k_mu: str | float = "minimal"
    k_sigma: KSigmaStrategy | float = KSigmaStrategy.INTERVAL_UPPER
    explicit_scale: float = RELAXED_SCALE
    k_global: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "mobility", MobilityMode(self.mobility))
        object.__setattr__(self, "interaction", InteractionMode(self.interaction))
        if not isinstance(self.k_sigma, (int, float)):
            object.__setattr__(self, "k_sigma", KSigmaStrategy(self.k_sigma))
        if not self.q > 1:
            raise InvalidExponent(f"q must be > 1, got {self.q}")
        if self.interaction is InteractionMode.FEEDBACK_UNTIL:
            if self.t_bar is None or self.t_bar < 0:
                raise ValueError("feedback-until needs t_bar >= 0")
        if isinstance(self.delta, str):
            if self.delta not in ("min", "positive-min"):
                raise ValueError(f"unknown delta rule {self.delta!r}")
        elif not 0 <= float(self.delta) < 1:
            raise ValueError(f"delta must lie in [0, 1), got {self.delta}")
        for name in ("k_chi", "k_mu"):
            value = getattr(self, name)
            if value != "minimal" and not float(value) > 0:
                raise NonpositivePenalization(f"{name} must be 'minimal' or > 0, got {value!r}")
        if isinstance(self.k_sigma, (int, float)) and not self.k_sigma > 0:
            raise NonpositivePenalization(f"k_sigma must be > 0, got {self.k_sigma}")

    def replace(self, **changes) -> "ControlPolicy":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return ControlPolicy(**kw)


@dataclass(frozen=True, eq=False)
class ControlSignal:
    u_chi: np.ndarray
    u_interaction: np.ndarray
    t: float = 0.0


def psi_prime(x, q: float):
    """Derivative of ``x**q / q``."""
    if not q > 1:
        raise InvalidExponent(f"q must be > 1, got {q}")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("psi_prime is defined for x >= 0")
    out = np.power(x, q - 1.0)
    return float(out) if out.ndim == 0 else out


def _positive(k, n, name):
    k = np.broadcast_to(np.asarray(k, dtype=float), (n,))
    if np.any(~(k > 0)):
        raise NonpositivePenalization(f"{name} must be > 0, got {k}")
    return k


def raw_u_chi(state: MacroState, P: TransitionMatrix, chi, k_chi, q):
    """Unclamped mobility control ``psi'(mom_i) chi / k_i (sum_j P_ij mom_j - mom_i)``."""
    k = _positive(k_chi, state.n, "k_chi")
    flux = P.entries @ state.mom - state.mom
    return psi_prime(state.mom, q) * chi / k * flux


def feedback_u_chi(state: MacroState, P: TransitionMatrix, chi, k_chi, q, delta):
    """Mobility control clamped to ``[delta, 1]``."""
    raw = raw_u_chi(state, P, chi, k_chi, q)
    if log.isEnabledFor(logging.DEBUG) and delta > 0 and np.any(raw < 0):
        log.debug("u_chi floor applied to negative raw control at nodes %s", np.flatnonzero(raw < 0) + 1)
    return np.minimum(np.maximum(delta, raw), 1.0)


def raw_u_mu(state: MacroState, params: ModelParams, k_mu, q):
    params.require(Variant.EXCHANGE)
    k = _positive(k_mu, state.n, "k_mu")
    return psi_prime(state.mom, q) * params.mu / k * (params.nu2 - params.nu1) * state.rho * state.mom


def feedback_u_mu(state: MacroState, params: ModelParams, k_mu, q):
    """Interaction control of the exchange model, clamped to ``[0, 1]``.

    Nodes with ``nu2 <= nu1`` get a nonpositive raw value and hence no control.
    """
    return np.clip(raw_u_mu(state, params, k_mu, q), 0.0, 1.0)


def penalization_k_chi(state_at_0: MacroState, state: MacroState, P: TransitionMatrix, chi, q):
    """Smallest admissible mobility penalization.

    ``rho_i(t)**(q-1) m_i(0)**(q-1) chi m_max(0) (1 - P_ii)`` where ``m_max(0)``
    is the largest initial mean (first node on ties).  Returns
    :data:`DISABLED_MOBILITY_CONTROL` when every coefficient vanishes.
    """
    if not chi > 0:
        raise ZeroChi("mobility penalization needs chi > 0; disable the mobility control instead")
    m0 = _initial_means(state_at_0)
    i_bar = int(np.argmax(m0))
    k = state.rho ** (q - 1) * m0 ** (q - 1) * chi * m0[i_bar] * (1.0 - np.diag(P.entries))
    if np.all(k == 0):
        return DISABLED_MOBILITY_CONTROL
    return k


def penalization_k_mu(state_at_0: MacroState, state: MacroState, params: ModelParams, q):
    """Smallest admissible interaction penalization for the exchange model.

    ``rho_i(t)**(q+1) m_i(0)**q mu (nu2 - nu1)``; nodes with ``nu2 <= nu1``
    never need control and get ``inf``.
    """
    params.require(Variant.EXCHANGE)
    m0 = _initial_means(state_at_0)
    gap = params.nu2 - params.nu1
    with np.errstate(invalid="ignore"):
        k = state.rho ** (q + 1) * m0 ** q * params.mu * gap
    return np.where(gap > 0, k, np.inf)


def _initial_means(state_at_0: MacroState):
    rho = state_at_0.rho
    return np.divide(state_at_0.mom, rho, out=np.zeros_like(rho), where=rho > 0)


def critical_density_ratio(params: ModelParams):
    with np.errstate(divide="ignore", invalid="ignore"):
        return params.gamma * params.nu1 / (params.sigma * params.nu2)


def _ksig_factor(params: ModelParams, strategy: KSigmaStrategy):
    rho_c = critical_density_ratio(params)
    if strategy is KSigmaStrategy.INTERVAL_LOWER:
        return np.ones(params.n)
    safe = rho_c < 1
    if not np.all(safe):
        warnings.warn(
            f"eradication penalization undefined where the critical density is >= 1 "
            f"(nodes {list(np.flatnonzero(~safe) + 1)}); using the lower bound there",
            InvalidCriticalWarning,
            stacklevel=3,
        )
    return np.where(safe, 1.0 / np.where(safe, 1.0 - rho_c, 1.0), 1.0)


def penalization_k_sigma(state: MacroState, params: ModelParams, q, strategy):
    """Penalization for the infection control.

    The admissible interval runs from ``rho**(q+1) m**q nu2 sigma`` (full
    suppression) to that value divided by ``1 - rho_c`` (infection rate
    brought exactly to the healing rate).
    """
    params.require(Variant.INFECTION_HEALING)
    if isinstance(strategy, (int, float)):
        return _positive(strategy, state.n, "k_sigma").copy()
    factor = _ksig_factor(params, KSigmaStrategy(strategy))
    return state.rho * state.mom ** q * params.nu2 * params.sigma * factor


def raw_u_sigma(state: MacroState, params: ModelParams, q, k_sigma):
    params.require(Variant.INFECTION_HEALING)
    k = np.asarray(k_sigma, dtype=float)
    num = psi_prime(state.mom, q) * params.sigma * params.nu2 * state.rho * state.mom
    return np.divide(num, k, out=np.zeros(state.n), where=k > 0)


def feedback_u_sigma(state: MacroState, params: ModelParams, q, k_strategy=KSigmaStrategy.INTERVAL_UPPER):
    """Infection control clamped to ``[0, 1]``; zero wherever ``mom`` vanishes."""
    k = penalization_k_sigma(state, params, q, k_strategy)
    return np.clip(raw_u_sigma(state, params, q, k), 0.0, 1.0)


def relaxed_u_sigma(state_at_0: MacroState, params: ModelParams, q, scale=RELAXED_SCALE):
    """Time-constant infection control ``clamp(scale * (rho_i(0) m_i(0))**q sigma nu2_i)``."""
    params.require(Variant.INFECTION_HEALING)
    k_tilde = state_at_0.mom ** q * params.sigma * params.nu2
    return np.clip(k_tilde * scale, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class GlobalControl:
    u: float
    u_tilde: np.ndarray

    @property
    def residual(self) -> float:
        return abs(self.u - float(np.sum(self.u_tilde)))


def global_u_mu(state: MacroState, params: ModelParams, k, q) -> GlobalControl:
    """Single network-wide interaction control and its per-node split.

    Both minimize ``psi`` of the total first moment; the targeted controls
    sum to the global one before clamping.
    """
    params.require(Variant.EXCHANGE)
    if not k > 0:
        raise NonpositivePenalization(f"k must be > 0, got {k}")
    total = float(np.sum(state.mom))
    u_tilde = psi_prime(total, q) * params.mu / k * (params.nu2 - params.nu1) * state.mom
    return GlobalControl(float(np.sum(u_tilde)), u_tilde)


def default_k_global(state_at_0: MacroState, params: ModelParams, q) -> float:
    """Penalization that scales the initial global control to magnitude one."""
    total = float(np.sum(state_at_0.mom))
    scale = float(np.sum(np.abs(params.nu2 - params.nu1) * state_at_0.mom))
    k = psi_prime(total, q) * params.mu * scale
    return k if k > 0 else 1.0


def plain_mean_u_chi(state: MacroState, P: TransitionMatrix, chi, k_chi, q):
    """Mobility control for the objective ``psi(m_i)`` instead of ``psi(rho_i m_i)``.

    The flux of the first moment is divided by ``rho_i`` because it is
    ``m_i``, not ``rho_i m_i``, whose derivative enters the optimality condition.
    """
    k = _positive(k_chi, state.n, "k_chi")
    m = state.mom / state.rho
    flux = P.entries @ state.mom - state.mom
    return psi_prime(m, q) * chi / k * flux / state.rho


def plain_mean_u_mu(state: MacroState, params: ModelParams, k_mu, q):
    params.require(Variant.EXCHANGE)
    k = _positive(k_mu, state.n, "k_mu")
    m = state.mom / state.rho
    return psi_prime(m, q) * params.mu / k * (params.nu2 - params.nu1) * state.mom


class Controller:
    """A policy resolved against a matrix, model and initial state.

    Packs everything the compiled integrator needs and evaluates the
    instantaneous :class:`ControlSignal` at any state.
    """

    def __init__(self, P: TransitionMatrix, params: ModelParams, policy: ControlPolicy, state_at_0: MacroState):
        if params.n != P.n or state_at_0.n != P.n:
            raise ValueError("matrix, parameters and initial state disagree on the node count")
        self.P = P
        self.params = params
        self.policy = policy
        self.state_at_0 = state_at_0
        self.delta = 0.0
        n = P.n
        q = float(policy.q)
        fpar = np.zeros(K.NFPAR)
        ipar = np.zeros(K.NIPAR, dtype=np.int64)
        node = np.zeros((K.NROWS, n))
        fpar[K.F_CHI] = params.chi
        fpar[K.F_RATE] = params.interaction_rate
        fpar[K.F_GAMMA] = params.gamma
        fpar[K.F_Q] = q
        fpar[K.F_TBAR] = policy.t_bar if policy.t_bar is not None else np.inf
        fpar[K.F_KGLOBAL] = 1.0
        ipar[K.I_MODEL] = K.EXCHANGE if params.variant is Variant.EXCHANGE else K.INFECTION
        node[K.R_NU1] = params.nu1
        node[K.R_NU2] = params.nu2
        m0 = _initial_means(state_at_0)

        mob = policy.mobility
        if mob is MobilityMode.FEEDBACK:
            if not params.chi > 0:
                raise ZeroChi("mobility feedback needs chi > 0; set mobility = off")
            ipar[K.I_MOB] = K.MOB_FEEDBACK
            self.delta = delta_floor(P, policy.delta)
            fpar[K.F_DELTA] = self.delta
            if policy.k_chi == "minimal":
                fpar[K.F_KCHI_POW] = q - 1.0
                node[K.R_KCHI] = m0 ** (q - 1) * params.chi * m0[int(np.argmax(m0))] * (1.0 - np.diag(P.entries))
            else:
                node[K.R_KCHI] = float(policy.k_chi)
        elif mob is MobilityMode.FULL_SUPPRESSION:
            ipar[K.I_MOB] = K.MOB_SUPPRESS

        mode = policy.interaction
        ipar[K.I_INT] = {
            InteractionMode.OFF: K.INT_OFF,
            InteractionMode.FEEDBACK: K.INT_FEEDBACK,
            InteractionMode.FEEDBACK_UNTIL: K.INT_UNTIL,
            InteractionMode.EXPLICIT_LAW: K.INT_EXPLICIT,
            InteractionMode.GLOBAL: K.INT_GLOBAL,
            InteractionMode.TARGETED: K.INT_TARGETED,
        }[mode]
        if mode in (InteractionMode.FEEDBACK, InteractionMode.FEEDBACK_UNTIL):
            if params.variant is Variant.EXCHANGE:
                if policy.k_mu == "minimal":
                    fpar[K.F_KMU_POW] = q + 1.0
                    gap = params.nu2 - params.nu1
                    node[K.R_KMU] = np.where(gap > 0, m0 ** q * params.mu * np.where(gap > 0, gap, 1.0), np.inf)
                else:
                    node[K.R_KMU] = float(policy.k_mu)
            elif isinstance(policy.k_sigma, (int, float)):
                ipar[K.I_KSIG] = K.KSIG_EXPLICIT
                node[K.R_KSIG] = float(policy.k_sigma)
            else:
                ipar[K.I_KSIG] = K.KSIG_INTERVAL
                node[K.R_KSIG] = _ksig_factor(params, policy.k_sigma)
        elif mode is InteractionMode.EXPLICIT_LAW:
            if params.variant is not Variant.INFECTION_HEALING:
                raise WrongVariant("the explicit relaxed law applies to the infection-healing model")
            node[K.R_UEXP] = relaxed_u_sigma(state_at_0, params, q, policy.explicit_scale)
        elif mode in (InteractionMode.GLOBAL, InteractionMode.TARGETED):
            if params.variant is not Variant.EXCHANGE:
                raise WrongVariant("global/targeted interaction control applies to the exchange model")
            k = policy.k_global if policy.k_global is not None else default_k_global(state_at_0, params, q)
            if not k > 0:
                raise NonpositivePenalization(f"k_global must be > 0, got {k}")
            fpar[K.F_KGLOBAL] = k

        self.fpar, self.ipar, self.node = fpar, ipar, node

    @property
    def k_global(self) -> float:
        return float(self.fpar[K.F_KGLOBAL])

    def signal(self, state: MacroState, t: float | None = None) -> ControlSignal:
        t = state.t if t is None else t
        n = state.n
        uc, ui, work = np.empty(n), np.empty(n), np.empty(n)
        K.controls(float(t), np.ascontiguousarray(state.rho), np.ascontiguousarray(state.mom),
                   self.P.entries, self.fpar, self.ipar, self.node, uc, ui, work)
        return ControlSignal(uc, ui, float(t))

    def rhs(self, t, rho, mom):
        """Right-hand side of the controlled system, as evaluated by the integrator."""
        n = rho.shape[0]
        drho, dmom = np.empty(n), np.empty(n)
        uc, ui, work = np.empty(n), np.empty(n), np.empty(n)
        K.rhs(float(t), np.asarray(rho, dtype=float), np.asarray(mom, dtype=float), self.P.entries,
              self.fpar, self.ipar, self.node, drho, dmom, uc, ui, work)
        return drho, dmom
