"""Experiment definitions in a sectioned ``key = value`` text format.

Example::

    [scenario]
    name = demo

    [model]
    variant = exchange
    chi = 1
    mu = 1
    nu1 = 0.25, 0.5
    nu2 = 0.8, 0.5

    [matrix]
    row_1 = 0.5, 0.3
    row_2 = 0.5, 0.7
    # or: file = path/to/matrix.csv  and  orientation = column | row

    [initial]
    rho = 0.4, 0.6          # or rho_counts = 1200, 1800  (normalized) or rho_file = path
    m = 2, 1

    [policy]
    mobility = feedback     # off | feedback | full-suppression
    interaction = off       # off | feedback | feedback-until | explicit-law | global | targeted
    q = 2

    [integration]
    dt = 0.01
    t_end = 100
    record_every = 10

Optional sections are ``[mc]`` (``N``, ``seed``, ``noise_c``, ``replicas``,
``dt``) and ``[outputs]`` (``dir``).  Relative file paths resolve against
the scenario file's directory.
"""

from __future__ import annotations

import configparser
import logging
import re
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .control import ControlPolicy, InteractionMode, KSigmaStrategy, MobilityMode
from .dynamics import MacroState, ModelParams, Variant
from .errors import InputError, ParseError, ScenarioValidationError, UnknownPreset
from .graph import EXACT_TOL, INGEST_TOL, TransitionMatrix, read_matrix_text, validate_transition

log = logging.getLogger(__name__)

SECTIONS = ("scenario", "model", "matrix", "initial", "policy", "integration", "mc", "outputs")
_SPLIT = re.compile(r"[,\s]+")


@dataclass(frozen=True)
class Integration:
    dt: float = 1e-2
    t_end: float = 100.0
    record_every: int = 10


@dataclass(frozen=True)
class MCSettings:
    N: int = 100_000
    seed: int = 7
    noise_c: float = 0.0
    replicas: int = 1
    dt: float = 1e-2


@dataclass(frozen=True, eq=False)
class MatrixSource:
    """Either inline raw rows or a file reference; kept for serialization."""

    raw: np.ndarray | None = None
    path: Path | None = None
    orientation: str = "column"
    tol: float | None = None


@dataclass(frozen=True, eq=False)
class Scenario:
    name: str
    params: ModelParams
    P: TransitionMatrix
    matrix_source: MatrixSource
    initial: MacroState
    policy: ControlPolicy = field(default_factory=ControlPolicy)
    integration: Integration = field(default_factory=Integration)
    mc: MCSettings | None = None
    output_dir: str = "out"
    description: str = ""

    @property
    def n(self) -> int:
        return self.P.n

    def with_overrides(self, **changes) -> "Scenario":
        """Replace integration fields (``dt``, ``t_end``, ``record_every``) or policy fields."""
        integ = {k: changes.pop(k) for k in list(changes) if k in Integration.__dataclass_fields__}
        pol = {k: changes.pop(k) for k in list(changes) if k in ControlPolicy.__dataclass_fields__}
        s = self
        if integ:
            s = replace(s, integration=replace(s.integration, **integ))
        if pol:
            s = replace(s, policy=s.policy.replace(**pol))
        if changes:
            s = replace(s, **changes)
        return s


# ---------------------------------------------------------------- parsing

def _line_of(text: str, section: str, key: str | None):
    sec = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            sec = s[1:-1].strip().lower()
        elif sec == section and key is not None and re.match(rf"{re.escape(key)}\s*[=:]", s, re.I):
            return lineno
    return None


class _Reader:
    def __init__(self, cp: configparser.ConfigParser, text: str, base: Path):
        self.cp, self.text, self.base = cp, text, base

    def has(self, sec, key):
        return self.cp.has_option(sec, key)

    def raw(self, sec, key, default=None, required=False):
        if self.cp.has_option(sec, key):
            return self.cp.get(sec, key).split("#", 1)[0].strip()
        if required:
            raise ParseError(f"missing required key [{sec}] {key}", field=f"{sec}.{key}")
        return default

    def fail(self, sec, key, msg):
        return ParseError(msg, line=_line_of(self.text, sec, key), field=f"{sec}.{key}")

    def num(self, sec, key, default=None, required=False, cast=float):
        v = self.raw(sec, key, None, required)
        if v is None:
            return default
        try:
            return cast(v)
        except ValueError:
            raise self.fail(sec, key, f"not a number: {v!r}") from None

    def vec(self, sec, key, required=False):
        v = self.raw(sec, key, None, required)
        if v is None:
            return None
        try:
            return np.array([float(t) for t in _SPLIT.split(v.strip(", ")) if t], dtype=float)
        except ValueError:
            raise self.fail(sec, key, f"bad number list: {v!r}") from None

    def path(self, sec, key):
        v = self.raw(sec, key)
        if v is None:
            return None
        p = Path(v).expanduser()
        p = p if p.is_absolute() else self.base / p
        if not p.exists():
            raise ScenarioValidationError(f"file not found: {p}", key=f"{sec}.{key}")
        return p


def _fit(vec, n, key):
    if vec.size == 1:
        return np.full(n, vec[0])
    if vec.size != n:
        raise ScenarioValidationError(f"expected {n} values, got {vec.size}", key=key)
    return vec


def _read_matrix(r: _Reader):
    sec = "matrix"
    orientation = r.raw(sec, "orientation", "column")
    if orientation not in ("column", "row"):
        raise r.fail(sec, "orientation", f"orientation must be column or row, got {orientation!r}")
    path = r.path(sec, "file")
    if path is not None:
        tol = r.num(sec, "tol", INGEST_TOL)
        raw = read_matrix_text(path.read_text(), source=str(path))
        src = MatrixSource(path=path, orientation=orientation, tol=tol)
    else:
        tol = r.num(sec, "tol", EXACT_TOL)
        keys = sorted((k for k in r.cp.options(sec) if re.fullmatch(r"row_\d+", k)), key=lambda k: int(k[4:]))
        if not keys:
            raise ParseError("matrix needs either file = ... or row_1, row_2, ... entries", field="matrix")
        rows = [r.vec(sec, f"row_{i}") if r.has(sec, f"row_{i}") else None for i in range(1, len(keys) + 1)]
        for i, row in enumerate(rows, start=1):
            if row is None:
                raise ParseError(f"matrix row {i} missing", field=f"matrix.row_{i}")
        width = rows[0].size
        for i, row in enumerate(rows, start=1):
            if row.size != width:
                raise r.fail(sec, f"row_{i}", f"matrix row {i} has {row.size} entries, expected {width}")
        if len(rows) < width:
            raise ParseError(f"matrix row {len(rows) + 1} missing", field=f"matrix.row_{len(rows) + 1}")
        if len(rows) > width:
            raise ParseError(f"matrix has {len(rows)} rows but {width} columns", field="matrix")
        raw = np.array(rows)
        src = MatrixSource(raw=raw, orientation=orientation, tol=tol)
    if orientation == "row":
        raw = raw.T
    try:
        P = validate_transition(raw, tol=tol)
    except InputError as exc:
        raise ScenarioValidationError(str(exc), key="matrix") from None
    return P, src


def _read_initial(r: _Reader, n: int):
    sec = "initial"
    total = r.num(sec, "total_mass", 1.0)
    rho = r.vec(sec, "rho")
    if rho is None:
        counts = r.vec(sec, "rho_counts")
        fpath = r.path(sec, "rho_file")
        if counts is None and fpath is not None:
            counts = read_vector_file(fpath)
        if counts is None:
            raise ParseError("initial needs rho, rho_counts or rho_file", field="initial.rho")
        counts = _fit(counts, n, "initial.rho_counts")
        if np.any(counts < 0) or counts.sum() <= 0:
            raise ScenarioValidationError("population counts must be nonnegative with positive sum", key="initial.rho_counts")
        factor = total / counts.sum()
        log.info("initial masses normalized by factor %.17g", factor)
        rho = counts * factor
    else:
        rho = _fit(rho, n, "initial.rho")
        if np.any(rho < 0):
            raise ScenarioValidationError("masses must be nonnegative", key="initial.rho")
        if abs(rho.sum() - total) > INGEST_TOL:
            raise ScenarioValidationError(f"masses sum to {rho.sum()!r}, expected {total}", key="initial.rho")
    m = r.vec(sec, "m", required=True)
    m = _fit(m, n, "initial.m")
    if np.any(m < 0):
        raise ScenarioValidationError("initial means must be nonnegative", key="initial.m")
    return MacroState.from_means(rho, m)


def read_vector_file(path) -> np.ndarray:
    """One number per line (or comma separated); ``#`` comments allowed."""
    vals = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        for tok in _SPLIT.split(line.strip(", ")) if line else ():
            try:
                vals.append(float(tok))
            except ValueError:
                raise ParseError(f"{path}: bad number {tok!r}", line=lineno) from None
    return np.array(vals)


def _read_params(r: _Reader, n: int):
    sec = "model"
    variant = r.raw(sec, "variant", required=True)
    try:
        variant = Variant(variant)
    except ValueError:
        raise r.fail(sec, "variant", f"unknown variant {variant!r}") from None
    nu1 = _fit(r.vec(sec, "nu1", required=True), n, "model.nu1")
    nu2 = _fit(r.vec(sec, "nu2", required=True), n, "model.nu2")
    kw = {k: r.num(sec, k, 0.0) for k in ("chi", "mu", "sigma", "gamma")}
    try:
        return ModelParams(variant, nu1, nu2, **kw)
    except ValueError as exc:
        raise ScenarioValidationError(str(exc), key="model") from None


def _read_policy(r: _Reader):
    sec = "policy"
    kw = {}
    if r.cp.has_section(sec):
        for key in ("mobility", "interaction", "delta", "k_chi", "k_mu", "k_sigma"):
            v = r.raw(sec, key)
            if v is not None:
                try:
                    kw[key] = float(v)
                except ValueError:
                    kw[key] = v
        for key in ("q", "t_bar", "explicit_scale", "k_global"):
            v = r.num(sec, key)
            if v is not None:
                kw[key] = v
    try:
        return ControlPolicy(**kw)
    except ValueError as exc:
        raise ScenarioValidationError(str(exc), key="policy") from None


def parse_scenario(text: str, base: Path | str = ".", source: str = "<text>") -> Scenario:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ParseError(f"{source}: {exc.message if hasattr(exc, 'message') else exc}",
                         line=getattr(exc, "lineno", None)) from None
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ParseError(f"unknown section [{sec}]", line=_line_of_section(text, sec), field=sec)
    for sec in ("model", "matrix", "initial"):
        if not cp.has_section(sec):
            raise ParseError(f"missing section [{sec}]", field=sec)
    r = _Reader(cp, text, Path(base))
    P, src = _read_matrix(r)
    params = _read_params(r, P.n)
    initial = _read_initial(r, P.n)
    policy = _read_policy(r)
    integ = Integration(
        dt=r.num("integration", "dt", 1e-2),
        t_end=r.num("integration", "t_end", 100.0),
        record_every=r.num("integration", "record_every", 10, cast=int),
    )
    if not (integ.dt > 0 and integ.t_end > 0 and integ.record_every >= 1):
        raise ScenarioValidationError("dt, t_end must be positive and record_every >= 1", key="integration")
    mc = None
    if cp.has_section("mc"):
        mc = MCSettings(
            N=r.num("mc", "N", 100_000, cast=int),
            seed=r.num("mc", "seed", 7, cast=int),
            noise_c=r.num("mc", "noise_c", 0.0),
            replicas=r.num("mc", "replicas", 1, cast=int),
            dt=r.num("mc", "dt", 1e-2),
        )
    return Scenario(
        name=r.raw("scenario", "name", Path(source).stem) if cp.has_section("scenario") else Path(source).stem,
        description=r.raw("scenario", "description", "") if cp.has_section("scenario") else "",
        params=params, P=P, matrix_source=src, initial=initial, policy=policy,
        integration=integ, mc=mc,
        output_dir=r.raw("outputs", "dir", "out") if cp.has_section("outputs") else "out",
    )


def _line_of_section(text, sec):
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.strip() == f"[{sec}]":
            return lineno
    return None


def load_scenario(path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read scenario file {path}: {exc.strerror}") from None
    return parse_scenario(text, base=path.parent, source=str(path))


# ---------------------------------------------------------- serialization

def _f(x) -> str:
    return repr(float(x))


def _v(a) -> str:
    return ", ".join(_f(x) for x in np.asarray(a).ravel())


def serialize(s: Scenario) -> str:
    """Text form that :func:`parse_scenario` reads back to an identical scenario."""
    p, pol = s.params, s.policy
    out = ["[scenario]", f"name = {s.name}"]
    if s.description:
        out.append(f"description = {s.description}")
    out += ["", "[model]", f"variant = {p.variant.value}", f"chi = {_f(p.chi)}"]
    if p.variant is Variant.EXCHANGE:
        out.append(f"mu = {_f(p.mu)}")
    else:
        out += [f"sigma = {_f(p.sigma)}", f"gamma = {_f(p.gamma)}"]
    out += [f"nu1 = {_v(p.nu1)}", f"nu2 = {_v(p.nu2)}", "", "[matrix]"]
    src = s.matrix_source
    if src.path is not None:
        out.append(f"file = {Path(src.path).resolve()}")
    else:
        out += [f"row_{i} = {_v(row)}" for i, row in enumerate(src.raw, start=1)]
    out.append(f"orientation = {src.orientation}")
    if src.tol is not None:
        out.append(f"tol = {_f(src.tol)}")
    rho, mom = s.initial.rho, s.initial.mom
    m = np.divide(mom, rho, out=np.zeros_like(rho), where=rho > 0)
    out += ["", "[initial]", f"rho = {_v(rho)}", f"m = {_v(m)}", f"total_mass = {_f(rho.sum())}"]
    out += ["", "[policy]", f"q = {_f(pol.q)}", f"mobility = {pol.mobility.value}",
            f"interaction = {pol.interaction.value}"]
    if pol.t_bar is not None:
        out.append(f"t_bar = {_f(pol.t_bar)}")
    out.append(f"delta = {pol.delta if isinstance(pol.delta, str) else _f(pol.delta)}")
    for key in ("k_chi", "k_mu"):
        v = getattr(pol, key)
        out.append(f"{key} = {v if isinstance(v, str) else _f(v)}")
    ks = pol.k_sigma
    out.append(f"k_sigma = {ks.value if isinstance(ks, KSigmaStrategy) else _f(ks)}")
    out.append(f"explicit_scale = {_f(pol.explicit_scale)}")
    if pol.k_global is not None:
        out.append(f"k_global = {_f(pol.k_global)}")
    it = s.integration
    out += ["", "[integration]", f"dt = {_f(it.dt)}", f"t_end = {_f(it.t_end)}", f"record_every = {it.record_every}"]
    if s.mc is not None:
        mc = s.mc
        out += ["", "[mc]", f"N = {mc.N}", f"seed = {mc.seed}", f"noise_c = {_f(mc.noise_c)}",
                f"replicas = {mc.replicas}", f"dt = {_f(mc.dt)}"]
    out += ["", "[outputs]", f"dir = {s.output_dir}", ""]
    return "\n".join(out)


def scenario_fields(s: Scenario) -> dict:
    """Flat comparable view, used for round-trip checks and run manifests."""
    src = s.matrix_source
    return {
        "name": s.name,
        "variant": s.params.variant.value,
        "chi": s.params.chi, "mu": s.params.mu, "sigma": s.params.sigma, "gamma": s.params.gamma,
        "nu1": s.params.nu1.tolist(), "nu2": s.params.nu2.tolist(),
        "P": s.P.entries.tolist(),
        "matrix_file": None if src.path is None else str(Path(src.path).resolve()),
        "orientation": src.orientation,
        "rho0": s.initial.rho.tolist(), "mom0": s.initial.mom.tolist(),
        "policy": {f.name: _plain(getattr(s.policy, f.name)) for f in fields(s.policy)},
        "integration": vars(s.integration).copy(),
        "mc": None if s.mc is None else vars(s.mc).copy(),
        "output_dir": s.output_dir,
    }


def _plain(v):
    return v.value if hasattr(v, "value") else v


# ----------------------------------------------------------------- presets

FIVE_NODE_P = np.array([
    [0.2, 0.5, 0.15, 0.1, 0.1],
    [0.2, 0.2, 0.45, 0.4, 0.2],
    [0.2, 0.1, 0.05, 0.2, 0.5],
    [0.2, 0.1, 0.1, 0.15, 0.1],
    [0.2, 0.1, 0.25, 0.15, 0.1],
])
FIVE_NODE_RHO0 = np.array([0.35, 0.1, 0.3, 0.05, 0.2])
FIVE_NODE_M0 = np.array([2.0, 4.0, 0.1, 1.0, 1.5])
TEST1_NU1 = np.array([0.25, 0.5, 0.15, 0.2, 0.75])
TEST1_NU2 = np.array([0.8, 0.5, 0.75, 0.1, 0.6])
LOMBARDY_SEED_NODE = 6


def data_path(name: str) -> Path:
    return Path(str(resources.files("kgcontrol") / "data" / name))


def _five_node(name, params, policy, t_end, description=""):
    P = validate_transition(FIVE_NODE_P)
    return Scenario(name=name, params=params, P=P, matrix_source=MatrixSource(raw=FIVE_NODE_P.copy(), tol=EXACT_TOL),
                    initial=MacroState.from_means(FIVE_NODE_RHO0, FIVE_NODE_M0), policy=policy,
                    integration=Integration(t_end=t_end), description=description,
                    mc=MCSettings())


def _test1(name, policy, description):
    return _five_node(name, ModelParams.exchange(TEST1_NU1, TEST1_NU2, chi=1.0, mu=1.0), policy, 100.0, description)


def _test2(name, policy, description, chi=1.0, t_end=50.0):
    return _five_node(name, ModelParams.infection_healing(0.15, 0.9, chi=chi, sigma=1.0, gamma=1.0, n=5),
                   policy, t_end, description)


def _lombardy(name, policy, description):
    path = data_path("lombardy_matrix.csv")
    raw = read_matrix_text(path.read_text(), source=str(path))
    P = validate_transition(raw, tol=INGEST_TOL)
    rho = read_vector_file(data_path("lombardy_population.csv"))
    m = np.full(P.n, 1.0 / 6.0)
    m[LOMBARDY_SEED_NODE - 1] = 6.0
    return Scenario(name=name, params=ModelParams.infection_healing(0.15, 0.9, chi=1.0, sigma=1.0, gamma=1.0, n=P.n),
                    P=P, matrix_source=MatrixSource(path=path, tol=INGEST_TOL), initial=MacroState.from_means(rho, m),
                    policy=policy, integration=Integration(t_end=100.0), description=description, mc=MCSettings())


FB = MobilityMode.FEEDBACK

PRESETS = {
    "test1_uncontrolled": lambda: _test1("test1_uncontrolled", ControlPolicy(), "exchange model, no control"),
    "test1_mobility_only": lambda: _test1(
        "test1_mobility_only", ControlPolicy(mobility=FB), "feedback control on mobility only"),
    "test1_mobility_suppression": lambda: _test1(
        "test1_mobility_suppression", ControlPolicy(mobility=MobilityMode.FULL_SUPPRESSION),
        "all mobility suppressed, no interaction control"),
    "test1_early_stop": lambda: _test1(
        "test1_early_stop", ControlPolicy(mobility=FB, interaction=InteractionMode.FEEDBACK_UNTIL, t_bar=30.0),
        "mobility feedback throughout, interaction feedback until t = 30"),
    "test1_full": lambda: _test1(
        "test1_full", ControlPolicy(mobility=FB, interaction=InteractionMode.FEEDBACK),
        "feedback control on mobility and interactions"),
    "test2_uncontrolled": lambda: _test2("test2_uncontrolled", ControlPolicy(), "infection-healing model, no control"),
    "test2_full_control": lambda: _test2(
        "test2_full_control", ControlPolicy(mobility=FB, interaction=InteractionMode.FEEDBACK),
        "mobility feedback and eradication-level infection control"),
    "lombardy_uncontrolled": lambda: _lombardy(
        "lombardy_uncontrolled", ControlPolicy(), "Lombardy mobility network, no control"),
    "lombardy_relaxed": lambda: _lombardy(
        "lombardy_relaxed", ControlPolicy(interaction=InteractionMode.EXPLICIT_LAW),
        "Lombardy mobility network, time-constant relaxed infection control"),
    "fig1_nu_equal": lambda: _five_node(
        "fig1_nu_equal", ModelParams.exchange(0.5, 0.5, chi=1.0, mu=1.0, n=5), ControlPolicy(), 200.0,
        "exchange model with nu1 = nu2 = 1/2: means relax to the conserved total moment"),
    "fig2_rhoic": lambda: _test2(
        "fig2_rhoic", ControlPolicy(), "infection-healing model without mobility: masses frozen", chi=0.0),
}


def preset_names():
    return list(PRESETS)


def preset(name: str) -> Scenario:
    try:
        return PRESETS[name]()
    except KeyError:
        raise UnknownPreset(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}") from None
