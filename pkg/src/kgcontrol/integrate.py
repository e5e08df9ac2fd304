"""Fixed-step RK4 integration of the controlled (rho, rho m) system."""

from __future__ import annotations

import csv
import enum
import io
import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .control import ControlPolicy, Controller, ControlSignal
from .dynamics import MEAN_FLOOR, MacroState, ModelParams
from .errors import NegativeStateBlowup, NonFiniteState, StepSizeTooLarge, TrajectoryTooShort
from .graph import TransitionMatrix

log = logging.getLogger(__name__)

DEFAULT_DT = 1e-2
DEFAULT_RECORD_EVERY = 10


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Sampled solution.  Arrays are indexed ``[sample, node]``."""

    times: np.ndarray
    rho: np.ndarray
    mom: np.ndarray
    u_chi: np.ndarray
    u_interaction: np.ndarray
    dt: float
    steps: int

    def __len__(self):
        return self.times.size

    @property
    def n(self) -> int:
        return self.rho.shape[1]

    @property
    def total_mass(self) -> np.ndarray:
        return self.rho.sum(axis=1)

    @property
    def total_mom(self) -> np.ndarray:
        return self.mom.sum(axis=1)

    @property
    def min_component(self) -> np.ndarray:
        return np.minimum(self.rho.min(axis=1), self.mom.min(axis=1))

    @property
    def mass_drift(self) -> float:
        return float(np.abs(self.total_mass - self.total_mass[0]).max())

    def means(self, mean_floor: float = MEAN_FLOOR) -> np.ndarray:
        m = np.full(self.rho.shape, np.nan)
        np.divide(self.mom, self.rho, out=m, where=self.rho >= mean_floor)
        return m

    def state(self, k: int) -> MacroState:
        return MacroState(self.rho[k], self.mom[k], self.times[k])

    def control(self, k: int) -> ControlSignal:
        return ControlSignal(self.u_chi[k].copy(), self.u_interaction[k].copy(), float(self.times[k]))

    @property
    def final(self) -> MacroState:
        return self.state(-1)

    def to_csv(self, target=None) -> str:
        """Write the documented column layout; undefined means are empty fields."""
        n = self.n
        header = (
            ["t"]
            + [f"rho_{i}" for i in range(1, n + 1)]
            + [f"mom_{i}" for i in range(1, n + 1)]
            + [f"m_{i}" for i in range(1, n + 1)]
            + [f"uchi_{i}" for i in range(1, n + 1)]
            + [f"uint_{i}" for i in range(1, n + 1)]
            + ["total_mass", "total_mom"]
        )
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        m = self.means()
        mass, tot = self.total_mass, self.total_mom
        for k in range(len(self)):
            w.writerow(
                [_fmt(self.times[k])]
                + [_fmt(x) for x in self.rho[k]]
                + [_fmt(x) for x in self.mom[k]]
                + ["" if math.isnan(x) else _fmt(x) for x in m[k]]
                + [_fmt(x) for x in self.u_chi[k]]
                + [_fmt(x) for x in self.u_interaction[k]]
                + [_fmt(mass[k]), _fmt(tot[k])]
            )
        text = buf.getvalue()
        if target is not None:
            with open(target, "w", newline="") as fh:
                fh.write(text)
        return text


def _fmt(x) -> str:
    return repr(float(x))


def _step_plan(t_end: float, dt: float):
    nsteps = max(1, math.ceil(t_end / dt - 1e-9))
    dt_last = t_end - (nsteps - 1) * dt
    return nsteps, dt_last


def fastest_rate(params: ModelParams) -> float:
    """Largest event frequency; a rate ``1/eps`` asks for ``dt <= eps/10``."""
    return max(params.chi, params.interaction_rate, params.gamma)


def integrate(
    controller: Controller,
    y0: MacroState,
    t_end: float,
    dt: float = DEFAULT_DT,
    record_every: int = DEFAULT_RECORD_EVERY,
) -> Trajectory:
    """Advance ``y0`` to ``t_end`` with classical RK4.

    Controls are re-evaluated from the stage state at every RK4 stage.
    Components in ``(-1e-10, 0)`` are clipped to zero after each step.
    """
    if not dt > 0 or not t_end > 0:
        raise ValueError(f"dt and t_end must be positive, got dt={dt}, t_end={t_end}")
    if record_every < 1:
        raise ValueError("record_every must be >= 1")
    if y0.n != controller.P.n:
        raise ValueError(f"initial state has {y0.n} nodes, matrix has {controller.P.n}")
    y0.check()
    rate = fastest_rate(controller.params)
    if dt * rate > 0.1:
        warnings.warn(
            f"dt={dt:g} is large against the fastest rate {rate:g}; keep dt <= {0.1 / rate:.3g}",
            RuntimeWarning,
            stacklevel=2,
        )
    nsteps, dt_last = _step_plan(t_end, dt)
    nrec = nsteps // record_every + 2
    status, step, count, times, R, M, UC, UI = K.rk4_run(
        np.ascontiguousarray(y0.rho, dtype=float),
        np.ascontiguousarray(y0.mom, dtype=float),
        float(dt), int(nsteps), float(dt_last), int(record_every), int(nrec),
        controller.P.entries, controller.fpar, controller.ipar, controller.node,
    )
    t_fail = (step - 1) * dt
    if status == K.NEGATIVE:
        raise NegativeStateBlowup(f"state component below -{K.NEG_CLIP:g} at step {step} (t~{t_fail:g})")
    if status == K.NONFINITE:
        raise NonFiniteState(f"non-finite state at step {step} (t~{t_fail:g})")
    if status == K.MASS_DRIFT:
        raise StepSizeTooLarge(f"mass drift above {K.MASS_TOL:g} at step {step} (t~{t_fail:g}); reduce dt")
    times = times[:count] + y0.t
    return Trajectory(times, R[:count], M[:count], UC[:count], UI[:count], float(dt), int(nsteps))


def simulate(P: TransitionMatrix, params: ModelParams, policy: ControlPolicy, y0: MacroState,
             t_end: float, dt: float = DEFAULT_DT, record_every: int = DEFAULT_RECORD_EVERY) -> Trajectory:
    return integrate(Controller(P, params, policy, y0), y0, t_end, dt, record_every)


class Verdict(str, enum.Enum):
    CONVERGED_TO_ZERO = "converged-to-zero"
    CONVERGED_TO_VALUE = "converged-to-value"
    GROWING = "growing"
    OSCILLATING = "oscillating"


@dataclass(frozen=True)
class NodeVerdict:
    verdict: Verdict
    slope: float
    rel_variation: float
    final: float


def convergence_report(traj: Trajectory, window: float, tol: float = 1e-3, zero_tol: float | None = None):
    """Classify the tail of every node mean over the last ``window`` time units.

    The log-mean is fitted by least squares on the window.  Growth above
    ``tol`` per unit time is ``growing``.  A tail whose final value is
    below ``zero_tol``, or that decays exponentially faster than ``tol``,
    is ``converged-to-zero``.  A flat tail whose values stay within
    relative ``tol * window`` of the last value is ``converged-to-value``;
    anything else is ``oscillating``.
    """
    if not window > 0:
        raise ValueError("window must be positive")
    span = traj.times[-1] - traj.times[0]
    if span < 2 * window:
        raise TrajectoryTooShort(f"trajectory spans {span:g}, needs at least {2 * window:g}")
    zero_tol = tol if zero_tol is None else zero_tol
    sel = traj.times >= traj.times[-1] - window
    t = traj.times[sel]
    m = traj.means()[sel]
    out = []
    for i in range(traj.n):
        y = m[:, i]
        final = float(y[-1])
        if np.any(np.isnan(y)):
            out.append(NodeVerdict(Verdict.OSCILLATING, float("nan"), float("nan"), final))
            continue
        if final < zero_tol:
            out.append(NodeVerdict(Verdict.CONVERGED_TO_ZERO, float("nan"), 0.0, final))
            continue
        logy = np.log(np.maximum(y, np.finfo(float).tiny))
        slope = float(np.polyfit(t - t[0], logy, 1)[0])
        rel = float((y.max() - y.min()) / abs(final))
        monotone = np.all(np.diff(y) >= 0) or np.all(np.diff(y) <= 0)
        if slope > tol:
            v = Verdict.GROWING
        elif slope < -tol and monotone:
            v = Verdict.CONVERGED_TO_ZERO
        elif rel <= tol * window:
            v = Verdict.CONVERGED_TO_VALUE
        else:
            v = Verdict.OSCILLATING
        out.append(NodeVerdict(v, slope, rel, final))
    return out
