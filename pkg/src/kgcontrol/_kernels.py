"""Compiled inner loops shared by the public API and the integrator.

Everything here works on raw float arrays.  Configuration travels in three
packed arrays so the RK4 loop can be compiled once:

``fpar``  float scalars, indexed by ``F_*``
``ipar``  integer mode codes, indexed by ``I_*``
``node``  per-node rows of shape ``(NROWS, n)``, indexed by ``R_*``
"""

import numpy as np
from numba import njit

# fpar
F_CHI, F_RATE, F_GAMMA, F_Q, F_TBAR, F_DELTA, F_KCHI_POW, F_KMU_POW, F_KGLOBAL = range(9)
NFPAR = 9
# ipar
I_MODEL, I_MOB, I_INT, I_KSIG = range(4)
NIPAR = 4
# node rows
R_NU1, R_NU2, R_KCHI, R_KMU, R_KSIG, R_UEXP = range(6)
NROWS = 6

EXCHANGE, INFECTION = 0, 1
MOB_OFF, MOB_FEEDBACK, MOB_SUPPRESS = 0, 1, 2
INT_OFF, INT_FEEDBACK, INT_UNTIL, INT_EXPLICIT, INT_GLOBAL, INT_TARGETED = range(6)
KSIG_INTERVAL, KSIG_EXPLICIT = 0, 1

OK, NEGATIVE, NONFINITE, MASS_DRIFT = 0, 1, 2, 3
NEG_CLIP = 1e-10
MASS_TOL = 1e-9


@njit(cache=True)
def pu_apply(P, u, x, out):
    """out = P^u x without forming P^u."""
    n = x.shape[0]
    for i in range(n):
        s = 0.0
        d = P[i, i]
        for j in range(n):
            if j != i:
                s += P[i, j] * x[j]
                d += u[j] * P[j, i]
        out[i] = (1.0 - u[i]) * s + d * x[i]


@njit(cache=True)
def psi_prime(x, q):
    if x <= 0.0:
        return 0.0
    return x ** (q - 1.0)


@njit(cache=True)
def raw_u_chi(P, mom, chi, k, q, out):
    n = mom.shape[0]
    for i in range(n):
        flux = -mom[i]
        for j in range(n):
            flux += P[i, j] * mom[j]
        if k[i] > 0.0 and np.isfinite(k[i]):
            out[i] = psi_prime(mom[i], q) * chi / k[i] * flux
        else:
            out[i] = 0.0


@njit(cache=True)
def raw_u_mu(rho, mom, mu, nu1, nu2, k, q, out):
    for i in range(mom.shape[0]):
        if k[i] > 0.0 and np.isfinite(k[i]):
            out[i] = psi_prime(mom[i], q) * mu / k[i] * (nu2[i] - nu1[i]) * rho[i] * mom[i]
        else:
            out[i] = 0.0


@njit(cache=True)
def raw_u_sigma(rho, mom, sigma, nu2, k, q, out):
    for i in range(mom.shape[0]):
        if k[i] > 0.0 and np.isfinite(k[i]):
            out[i] = psi_prime(mom[i], q) * sigma / k[i] * nu2[i] * rho[i] * mom[i]
        else:
            out[i] = 0.0


@njit(cache=True)
def clamp(x, lo):
    if x < lo:
        x = lo
    if x > 1.0:
        x = 1.0
    return x


@njit(cache=True)
def controls(t, rho, mom, P, fpar, ipar, node, uc, ui, work):
    """Evaluate the mobility and interaction controls at one state."""
    n = rho.shape[0]
    q = fpar[F_Q]
    mob = ipar[I_MOB]
    if mob == MOB_FEEDBACK:
        for i in range(n):
            work[i] = rho[i] ** fpar[F_KCHI_POW] * node[R_KCHI, i]
        raw_u_chi(P, mom, fpar[F_CHI], work, q, uc)
        for i in range(n):
            uc[i] = clamp(uc[i], fpar[F_DELTA])
    elif mob == MOB_SUPPRESS:
        uc[:] = 1.0
    else:
        uc[:] = 0.0

    mode = ipar[I_INT]
    active = mode == INT_FEEDBACK or (mode == INT_UNTIL and t <= fpar[F_TBAR])
    if active:
        if ipar[I_MODEL] == EXCHANGE:
            for i in range(n):
                work[i] = rho[i] ** fpar[F_KMU_POW] * node[R_KMU, i]
            raw_u_mu(rho, mom, fpar[F_RATE], node[R_NU1], node[R_NU2], work, q, ui)
        else:
            if ipar[I_KSIG] == KSIG_EXPLICIT:
                for i in range(n):
                    work[i] = node[R_KSIG, i]
            else:
                for i in range(n):
                    work[i] = rho[i] * mom[i] ** q * node[R_NU2, i] * fpar[F_RATE] * node[R_KSIG, i]
            raw_u_sigma(rho, mom, fpar[F_RATE], node[R_NU2], work, q, ui)
        for i in range(n):
            ui[i] = clamp(ui[i], 0.0)
    elif mode == INT_EXPLICIT:
        for i in range(n):
            ui[i] = node[R_UEXP, i]
    elif mode == INT_GLOBAL or mode == INT_TARGETED:
        total = 0.0
        for i in range(n):
            total += mom[i]
        scale = psi_prime(total, q) * fpar[F_RATE] / fpar[F_KGLOBAL]
        g = 0.0
        for i in range(n):
            work[i] = scale * (node[R_NU2, i] - node[R_NU1, i]) * mom[i]
            g += work[i]
        for i in range(n):
            ui[i] = clamp(g if mode == INT_GLOBAL else work[i], 0.0)
    else:
        ui[:] = 0.0


@njit(cache=True)
def rhs(t, rho, mom, P, fpar, ipar, node, drho, dmom, uc, ui, work):
    n = rho.shape[0]
    chi = fpar[F_CHI]
    controls(t, rho, mom, P, fpar, ipar, node, uc, ui, work)
    pu_apply(P, uc, rho, drho)
    pu_apply(P, uc, mom, dmom)
    rate = fpar[F_RATE]
    if ipar[I_MODEL] == EXCHANGE:
        for i in range(n):
            drho[i] = chi * (drho[i] - rho[i])
            dmom[i] = (
                chi * (dmom[i] - mom[i])
                + rate * (1.0 - ui[i]) * (node[R_NU2, i] - node[R_NU1, i]) * rho[i] * mom[i]
            )
    else:
        gamma = fpar[F_GAMMA]
        for i in range(n):
            drho[i] = chi * (drho[i] - rho[i])
            dmom[i] = (
                chi * (dmom[i] - mom[i])
                + rate * (1.0 - ui[i]) * node[R_NU2, i] * rho[i] * mom[i]
                - gamma * node[R_NU1, i] * mom[i]
            )


@njit(cache=True)
def rk4_run(rho0, mom0, dt, nsteps, dt_last, record_every, nrec, P, fpar, ipar, node):
    """Classical RK4 with fixed step; returns (status, step, count, times, rho, mom, uc, ui)."""
    n = rho0.shape[0]
    times = np.empty(nrec)
    R = np.empty((nrec, n))
    M = np.empty((nrec, n))
    UC = np.empty((nrec, n))
    UI = np.empty((nrec, n))

    rho = rho0.copy()
    mom = mom0.copy()
    k1r = np.empty(n); k1m = np.empty(n)
    k2r = np.empty(n); k2m = np.empty(n)
    k3r = np.empty(n); k3m = np.empty(n)
    k4r = np.empty(n); k4m = np.empty(n)
    sr = np.empty(n); sm = np.empty(n)
    uc = np.empty(n); ui = np.empty(n); work = np.empty(n)

    mass0 = 0.0
    for i in range(n):
        mass0 += rho0[i]

    controls(0.0, rho, mom, P, fpar, ipar, node, uc, ui, work)
    times[0] = 0.0
    R[0] = rho; M[0] = mom; UC[0] = uc; UI[0] = ui
    count = 1
    t = 0.0
    for step in range(1, nsteps + 1):
        h = dt_last if step == nsteps else dt
        rhs(t, rho, mom, P, fpar, ipar, node, k1r, k1m, uc, ui, work)
        for i in range(n):
            sr[i] = rho[i] + 0.5 * h * k1r[i]
            sm[i] = mom[i] + 0.5 * h * k1m[i]
        rhs(t + 0.5 * h, sr, sm, P, fpar, ipar, node, k2r, k2m, uc, ui, work)
        for i in range(n):
            sr[i] = rho[i] + 0.5 * h * k2r[i]
            sm[i] = mom[i] + 0.5 * h * k2m[i]
        rhs(t + 0.5 * h, sr, sm, P, fpar, ipar, node, k3r, k3m, uc, ui, work)
        for i in range(n):
            sr[i] = rho[i] + h * k3r[i]
            sm[i] = mom[i] + h * k3m[i]
        rhs(t + h, sr, sm, P, fpar, ipar, node, k4r, k4m, uc, ui, work)
        mass = 0.0
        for i in range(n):
            rho[i] += h / 6.0 * (k1r[i] + 2.0 * k2r[i] + 2.0 * k3r[i] + k4r[i])
            mom[i] += h / 6.0 * (k1m[i] + 2.0 * k2m[i] + 2.0 * k3m[i] + k4m[i])
            mass += rho[i]
        t = (step - 1) * dt + h

        for i in range(n):
            if not (np.isfinite(rho[i]) and np.isfinite(mom[i])):
                return NONFINITE, step, count, times, R, M, UC, UI
            if rho[i] < 0.0:
                if rho[i] < -NEG_CLIP:
                    return NEGATIVE, step, count, times, R, M, UC, UI
                rho[i] = 0.0
            if mom[i] < 0.0:
                if mom[i] < -NEG_CLIP:
                    return NEGATIVE, step, count, times, R, M, UC, UI
                mom[i] = 0.0
        if abs(mass - mass0) > MASS_TOL:
            return MASS_DRIFT, step, count, times, R, M, UC, UI

        if step % record_every == 0 or step == nsteps:
            controls(t, rho, mom, P, fpar, ipar, node, uc, ui, work)
            times[count] = t
            R[count] = rho; M[count] = mom; UC[count] = uc; UI[count] = ui
            count += 1
    return OK, nsteps, count, times, R, M, UC, UI
