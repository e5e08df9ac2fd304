"""Transition matrices on a directed graph.

Entry ``(i, j)`` of a transition matrix is the probability that an agent
sitting in node ``j`` jumps to node ``i``, so every column sums to one
(left stochastic).  The controlled matrix reduces the inflow into node
``i`` by the factor ``1 - u_chi[i]`` and returns the removed probability to
the diagonal of the source column.
"""

from __future__ import annotations

import logging
import re
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    EmptyMatrix,
    NegativeEntry,
    NoConvergence,
    NonStochastic,
    OutOfRangeControl,
    ParseError,
    Reducible,
)

log = logging.getLogger(__name__)

EXACT_TOL = 1e-12
INGEST_TOL = 1e-9
MAX_POWER_ITERATIONS = 10**6


@dataclass(frozen=True, eq=False)
class TransitionMatrix:
    """Validated column-stochastic matrix.  Build it with :func:`validate_transition`."""

    entries: np.ndarray
    irreducible: bool

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.entries if dtype is None else self.entries.astype(dtype)

    def __repr__(self):
        return f"TransitionMatrix(n={self.n}, irreducible={self.irreducible})"


@dataclass(frozen=True, eq=False)
class StationaryDensity:
    rho_inf: np.ndarray
    iterations: int
    residual: float


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


def _reachable(adj: np.ndarray, start: int = 0) -> np.ndarray:
    seen = np.zeros(adj.shape[0], dtype=bool)
    seen[start] = True
    queue = deque([start])
    while queue:
        k = queue.popleft()
        for nxt in np.flatnonzero(adj[k]):
            if not seen[nxt]:
                seen[nxt] = True
                queue.append(nxt)
    return seen


def is_irreducible(entries) -> bool:
    """Strong connectivity of the digraph ``j -> i`` wherever ``entries[i, j] > 0``."""
    a = np.asarray(entries)
    if a.shape[0] == 1:
        return True
    # row k of adj lists successors of k: edge k -> i iff a[i, k] > 0
    adj = (a > 0).T
    return bool(_reachable(adj).all() and _reachable(adj.T).all())


def validate_transition(raw, tol: float = EXACT_TOL) -> TransitionMatrix:
    """Check and renormalize a column-stochastic matrix.

    Columns whose sum is within ``tol`` of one are rescaled to sum to one
    exactly (up to rounding); anything further off raises
    :class:`NonStochastic`.
    """
    a = np.array(raw, dtype=float)
    if a.size == 0:
        raise EmptyMatrix("transition matrix is empty")
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise EmptyMatrix(f"transition matrix must be square, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonStochastic("transition matrix has non-finite entries")
    if np.any(a < 0):
        i, j = np.argwhere(a < 0)[0]
        raise NegativeEntry(f"entry ({i + 1},{j + 1}) = {a[i, j]!r} is negative")
    sums = a.sum(axis=0)
    bad = np.flatnonzero(np.abs(sums - 1.0) >= tol)
    if bad.size:
        j = bad[0]
        raise NonStochastic(f"column {j + 1} sums to {sums[j]!r} (tolerance {tol:g})")
    a = a / sums
    return TransitionMatrix(_frozen(a), is_irreducible(a))


def controlled_matrix(P: TransitionMatrix, u_chi) -> TransitionMatrix:
    """Mobility-controlled matrix.

    Off-diagonal ``P[i, j] * (1 - u_chi[i])``; the diagonal collects the rest
    of each column, ``P[i, i] + sum_{k != i} u_chi[k] P[k, i]``.
    """
    u = np.asarray(u_chi, dtype=float)
    if u.shape != (P.n,):
        raise OutOfRangeControl(f"u_chi must have length {P.n}, got shape {u.shape}")
    if np.any(~np.isfinite(u)) or np.any(u < 0) or np.any(u > 1):
        raise OutOfRangeControl(f"u_chi must lie in [0, 1], got {u}")
    a = P.entries
    off = a * (1.0 - u)[:, None]
    np.fill_diagonal(off, 0.0)
    diag = np.diag(a) + (u[:, None] * a).sum(axis=0) - u * np.diag(a)
    pu = off + np.diag(diag)
    if P.irreducible and u.max(initial=0.0) < 1.0:
        irreducible = True
    else:
        irreducible = is_irreducible(pu)
    return TransitionMatrix(_frozen(pu), irreducible)


def stationary_density(
    P: TransitionMatrix,
    total_mass: float = 1.0,
    tol: float = 1e-12,
    max_iter: int = MAX_POWER_ITERATIONS,
) -> StationaryDensity:
    """Perron vector of ``P`` scaled to ``total_mass``.

    Iterates the lazy chain ``(P + I) / 2``, which has the same fixed point
    and no periodic eigenvalues, with l1 renormalization until
    ``max |P rho - rho| < tol * total_mass``.
    """
    if not P.irreducible:
        raise Reducible("stationary density is not unique for a reducible matrix")
    a = P.entries
    rho = np.full(P.n, 1.0 / P.n)
    for it in range(1, max_iter + 1):
        nxt = 0.5 * (rho + a @ rho)
        nxt /= nxt.sum()
        rho = nxt
        if it % 8 == 0 or P.n == 1:
            res = np.abs(a @ rho - rho).max()
            if res < tol:
                return StationaryDensity(_frozen(rho * total_mass), it, float(res) * total_mass)
    raise NoConvergence(f"power iteration did not reach {tol:g} in {max_iter} iterations")


def check_metzler_condition(P: TransitionMatrix) -> bool:
    """``P[i, i] >= sum_{k != i} P[i, k] - 1`` for every row ``i``.

    When it holds the mass system under any admissible mobility control is
    globally asymptotically stable.
    """
    a = P.entries
    diag = np.diag(a)
    off_row = a.sum(axis=1) - diag
    return bool(np.all(diag >= off_row - 1.0))


def delta_floor(P: TransitionMatrix, rule="min") -> float:
    """Clamp floor for the mobility control.

    ``"min"`` is the smallest entry of ``P`` (zero for sparse graphs),
    ``"positive-min"`` the smallest strictly positive entry; a number is
    used as is.
    """
    if isinstance(rule, str):
        if rule == "min":
            return float(P.entries.min())
        if rule == "positive-min":
            return float(P.entries[P.entries > 0].min())
        raise ValueError(f"unknown delta rule {rule!r}")
    value = float(rule)
    if not 0.0 <= value < 1.0:
        raise OutOfRangeControl(f"delta must lie in [0, 1), got {value}")
    return value


_SPLIT = re.compile(r"[,\s]+")


def read_matrix_text(text: str, source: str = "<text>") -> np.ndarray:
    """Parse a delimited matrix: one row per line, comma or whitespace separated.

    Blank lines and ``#`` comments are skipped.
    """
    rows = []
    row_lines = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            rows.append([float(tok) for tok in _SPLIT.split(line.strip(", ")) if tok])
        except ValueError as exc:
            raise ParseError(f"{source}: bad number in matrix row {len(rows) + 1}: {exc}", line=lineno) from None
        row_lines.append(lineno)
    if not rows:
        raise EmptyMatrix(f"{source}: no matrix rows found")
    width = len(rows[0])
    for k, (r, lineno) in enumerate(zip(rows, row_lines), start=1):
        if len(r) != width:
            raise ParseError(f"{source}: matrix row {k} has {len(r)} entries, expected {width}", line=lineno)
    if len(rows) != width:
        raise ParseError(
            f"{source}: matrix has {len(rows)} rows but {width} columns (row {len(rows) + 1} missing)"
            if len(rows) < width
            else f"{source}: matrix has {len(rows)} rows but {width} columns"
        )
    return np.array(rows, dtype=float)


def load_matrix(path, orientation: str = "column", tol: float = INGEST_TOL) -> TransitionMatrix:
    """Read and validate a transition matrix file.

    ``orientation="row"`` means the file stores a row-stochastic matrix
    (entry ``(i, j)`` = probability of ``i -> j``); it is transposed on load.
    """
    path = Path(path)
    raw = read_matrix_text(path.read_text(), source=str(path))
    if orientation == "row":
        raw = raw.T
    elif orientation != "column":
        raise ValueError(f"orientation must be 'column' or 'row', got {orientation!r}")
    return validate_transition(raw, tol=tol)
