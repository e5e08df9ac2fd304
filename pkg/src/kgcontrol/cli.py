"""Command-line front end.

Exit codes: 0 success, 1 invalid input, 2 failure while running.  Errors are
printed to stderr as one ``key=value`` line.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .control import Controller, InteractionMode, KSigmaStrategy, global_u_mu
from .dynamics import Variant
from .errors import InputError, KineticError
from .graph import check_metzler_condition, load_matrix, stationary_density
from .integrate import simulate
from .mc import run_replicas
from .scenario import MCSettings, Scenario, load_scenario, preset, preset_names, scenario_fields
from .spectral import r0_bounds_controlled, r0_bounds_uncontrolled

log = logging.getLogger("kgcontrol")


def _quote(s: str) -> str:
    return json.dumps(str(s))


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--preset", help="built-in scenario name (see preset-list)")
    src.add_argument("--scenario", type=Path, help="scenario file")
    p.add_argument("--dt", type=float, help="time step")
    p.add_argument("--t-end", type=float, help="final time")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--seed", type=int, help="Monte Carlo seed")
    delta = p.add_mutually_exclusive_group()
    delta.add_argument("--delta", type=float, help="mobility clamp floor")
    delta.add_argument("--delta-positive-min", action="store_true",
                       help="use the smallest positive matrix entry as the mobility floor")
    p.add_argument("--k-sigma-strategy", help="interval-upper, interval-lower or a positive number")
    p.add_argument("--quiet", action="store_true", help="suppress the summary on stdout")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="kgcontrol", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", parents=[common], help="check a transition matrix or scenario")
    v.add_argument("--matrix", type=Path, help="delimited matrix file")
    orient = v.add_mutually_exclusive_group()
    orient.add_argument("--column-stochastic", dest="orientation", action="store_const", const="column")
    orient.add_argument("--row-stochastic", dest="orientation", action="store_const", const="row")
    v.add_argument("--tol", type=float, default=1e-9, help="column-sum tolerance for --matrix")
    v.set_defaults(orientation="column")

    sub.add_parser("stationary", parents=[common], help="print the stationary mass distribution")
    sub.add_parser("simulate", parents=[common], help="integrate the moment equations")

    mc = sub.add_parser("simulate-mc", parents=[common], help="Monte Carlo particle simulation")
    mc.add_argument("--agents", type=int, help="number of agents N")
    mc.add_argument("--noise", type=float, help="uniform noise half-width c")
    mc.add_argument("--replicas", type=int, help="independent replicas")
    mc.add_argument("--workers", type=int, default=None, help="worker processes for replicas")

    sub.add_parser("r0", parents=[common], help="reproduction-number bounds over time")
    sub.add_parser("compare-global-local", parents=[common], help="global versus per-node interaction control")
    sub.add_parser("preset-list", parents=[common], help="list built-in scenarios")
    return parser


# ------------------------------------------------------------------ helpers

def _scenario(args) -> Scenario:
    if args.scenario is not None:
        s = load_scenario(args.scenario)
    elif args.preset is not None:
        s = preset(args.preset)
    else:
        raise InputError("give --preset NAME or --scenario FILE")
    over = {}
    if args.dt is not None:
        over["dt"] = args.dt
    if args.t_end is not None:
        over["t_end"] = args.t_end
    if args.delta is not None:
        over["delta"] = args.delta
    if args.delta_positive_min:
        over["delta"] = "positive-min"
    if args.k_sigma_strategy is not None:
        try:
            over["k_sigma"] = float(args.k_sigma_strategy)
        except ValueError:
            over["k_sigma"] = KSigmaStrategy(args.k_sigma_strategy)
    if args.out is not None:
        over["output_dir"] = str(args.out)
    return s.with_overrides(**over)


def _out_dir(args, s: Scenario) -> Path:
    d = Path(args.out) if args.out is not None else Path(s.output_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_atomic(path: Path, text: str):
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_manifest(out_dir: Path, s: Scenario, command: str, outputs, caught, started: float, extra=None) -> Path:
    missing = [str(p) for p in outputs if not Path(p).exists()]
    if missing:
        raise KineticError(f"output files missing before manifest: {missing}")
    manifest = {
        "command": command,
        "software": {"package": "kgcontrol", "version": __version__, "numpy": np.__version__},
        "wall_clock_seconds": round(time.perf_counter() - started, 6),
        "scenario": scenario_fields(s),
        "outputs": [str(p) for p in outputs],
        "warnings": [str(w.message) for w in caught],
    }
    if extra:
        manifest.update(extra)
    path = out_dir / f"{s.name}.{command}.manifest.json"
    write_atomic(path, json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    return str(o)


def _fmt_vec(a) -> str:
    return " ".join("nan" if np.isnan(x) else f"{x:.6g}" for x in np.asarray(a, dtype=float))


def _say(args, *lines):
    if not args.quiet:
        for line in lines:
            print(line)


# ----------------------------------------------------------------- commands

def cmd_preset_list(args, caught, started):
    for name in preset_names():
        s = preset(name)
        print(f"{name}\t{s.params.variant.value}\tn={s.n}\tt_end={s.integration.t_end:g}\t{s.description}")
    return 0


def cmd_validate(args, caught, started):
    if args.matrix is not None:
        P = load_matrix(args.matrix, orientation=args.orientation, tol=args.tol)
        source = str(args.matrix)
    else:
        s = _scenario(args)
        P, source = s.P, s.name
    print(f"status=ok source={_quote(source)} n={P.n} irreducible={str(P.irreducible).lower()} "
          f"metzler={str(check_metzler_condition(P)).lower()}")
    return 0


def cmd_stationary(args, caught, started):
    s = _scenario(args)
    st = stationary_density(s.P, total_mass=float(s.initial.rho.sum()))
    print("node,rho_inf")
    for i, x in enumerate(st.rho_inf, start=1):
        print(f"{i},{float(x)!r}")
    if not args.quiet:
        print(f"# iterations={st.iterations} residual={st.residual:.3g}", file=sys.stderr)
    return 0


def cmd_simulate(args, caught, started):
    s = _scenario(args)
    it = s.integration
    traj = simulate(s.P, s.params, s.policy, s.initial, it.t_end, it.dt, it.record_every)
    out = _out_dir(args, s)
    csv_path = out / f"{s.name}.csv"
    write_atomic(csv_path, traj.to_csv())
    write_manifest(out, s, "simulate", [csv_path], caught, started,
                   {"mass_drift": traj.mass_drift, "steps": traj.steps})
    m = traj.means()[-1]
    _say(args,
         f"scenario={s.name} t={traj.times[-1]:g} steps={traj.steps} mass_drift={traj.mass_drift:.3g}",
         f"rho   {_fmt_vec(traj.rho[-1])}",
         f"m     {_fmt_vec(m)}",
         f"uchi  {_fmt_vec(traj.u_chi[-1])}",
         f"uint  {_fmt_vec(traj.u_interaction[-1])}",
         f"total_mass={traj.total_mass[-1]:.12g} total_mom={traj.total_mom[-1]:.6g}",
         f"csv={csv_path}")
    return 0


def cmd_simulate_mc(args, caught, started):
    s = _scenario(args)
    mc = s.mc or MCSettings()
    mc = replace(
        mc,
        N=args.agents if args.agents is not None else mc.N,
        seed=args.seed if args.seed is not None else mc.seed,
        noise_c=args.noise if args.noise is not None else mc.noise_c,
        replicas=args.replicas if args.replicas is not None else mc.replicas,
        dt=args.dt if args.dt is not None else mc.dt,
    )
    s = replace(s, mc=mc)
    runs = run_replicas(mc.replicas, mc.seed, workers=args.workers, P=s.P, params=s.params, policy=s.policy,
                        y0=s.initial, N=mc.N, t_end=s.integration.t_end, dt=mc.dt, noise_c=mc.noise_c,
                        record_every=max(1, round(s.integration.record_every * s.integration.dt / mc.dt)))
    out = _out_dir(args, s)
    paths = []
    for k, run in enumerate(runs, start=1):
        p = out / (f"{s.name}.mc.csv" if mc.replicas == 1 else f"{s.name}.mc.r{k}.csv")
        write_atomic(p, run.to_csv())
        paths.append(p)
    write_manifest(out, s, "simulate-mc", paths, caught, started, {"replica_seeds": [r.seed for r in runs]})
    last = runs[0]
    _say(args,
         f"scenario={s.name} N={mc.N} seed={mc.seed} replicas={mc.replicas} t={last.times[-1]:g}",
         f"rho    {_fmt_vec(last.rho[-1])}",
         f"mom    {_fmt_vec(last.mom[-1])}",
         f"se_mom {_fmt_vec(last.se_mom[-1])}",
         *(f"csv={p}" for p in paths))
    return 0


def cmd_r0(args, caught, started):
    s = _scenario(args)
    s.params.require(Variant.INFECTION_HEALING)
    st = stationary_density(s.P, total_mass=float(s.initial.rho.sum()))
    base = r0_bounds_uncontrolled(s.P, st, s.params)
    it = s.integration
    traj = simulate(s.P, s.params, s.policy, s.initial, it.t_end, it.dt, it.record_every)
    lines = ["t,lower,upper"]
    for k, t in enumerate(traj.times):
        b = r0_bounds_controlled(s.P, st, s.params, traj.u_chi[k], traj.u_interaction[k])
        lines.append(f"{t!r},{b.lower!r},{b.upper!r}")
    fin = r0_bounds_controlled(s.P, st, s.params, traj.u_chi[-1], traj.u_interaction[-1])
    lines.append(f"asymptotic,{fin.lower!r},{fin.upper!r}")
    text = "\n".join(lines) + "\n"
    out = _out_dir(args, s)
    path = out / f"{s.name}.r0.csv"
    write_atomic(path, text)
    write_manifest(out, s, "r0", [path], caught, started,
                   {"uncontrolled": [base.lower, base.upper], "asymptotic": [fin.lower, fin.upper]})
    _say(args,
         f"scenario={s.name} uncontrolled_lower={base.lower:.6g} uncontrolled_upper={base.upper:.6g}",
         f"asymptotic_lower={fin.lower:.6g} asymptotic_upper={fin.upper:.6g}",
         f"csv={path}")
    return 0


def cmd_compare_global_local(args, caught, started):
    s = _scenario(args)
    s.params.require(Variant.EXCHANGE)
    it = s.integration
    runs = {}
    for mode in (InteractionMode.GLOBAL, InteractionMode.TARGETED):
        pol = s.policy.replace(interaction=mode)
        runs[mode] = simulate(s.P, s.params, pol, s.initial, it.t_end, it.dt, it.record_every)
    g, tg = runs[InteractionMode.GLOBAL], runs[InteractionMode.TARGETED]
    k = Controller(s.P, s.params, s.policy.replace(interaction=InteractionMode.GLOBAL), s.initial).k_global
    n = s.n
    header = (["t", "u_global"] + [f"utilde_{i}" for i in range(1, n + 1)]
              + ["residual", "total_mom_global", "total_mom_targeted"])
    lines = [",".join(header)]
    max_res, violations, eligible = 0.0, 0, 0
    for j, t in enumerate(g.times):
        gc = global_u_mu(g.state(j), s.params, k, s.policy.q)
        max_res = max(max_res, gc.residual)
        if np.all(gc.u_tilde >= 0):
            eligible += 1
            violations += int(np.any(gc.u_tilde > gc.u + 1e-15))
        lines.append(",".join([repr(float(t)), repr(gc.u)] + [repr(float(x)) for x in gc.u_tilde]
                              + [repr(gc.residual), repr(float(g.total_mom[j])), repr(float(tg.total_mom[j]))]))
    out = _out_dir(args, s)
    path = out / f"{s.name}.global-local.csv"
    write_atomic(path, "\n".join(lines) + "\n")
    write_manifest(out, s, "compare-global-local", [path], caught, started,
                   {"k_global": k, "max_residual": max_res, "samples_all_nonnegative": eligible,
                    "samples_with_utilde_above_u": violations})
    _say(args,
         f"scenario={s.name} k_global={k:.6g} max_residual={max_res:.3g}",
         f"samples_all_terms_nonnegative={eligible} samples_with_utilde_above_u={violations}",
         f"final_total_mom_global={g.total_mom[-1]:.6g} final_total_mom_targeted={tg.total_mom[-1]:.6g}",
         f"csv={path}")
    return 0


COMMANDS = {
    "validate": cmd_validate,
    "stationary": cmd_stationary,
    "simulate": cmd_simulate,
    "simulate-mc": cmd_simulate_mc,
    "r0": cmd_r0,
    "compare-global-local": cmd_compare_global_local,
    "preset-list": cmd_preset_list,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    started = time.perf_counter()
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            code = COMMANDS[args.command](args, caught, started)
        except KineticError as exc:
            code = exc.exit_code
            print(f"error={type(exc).__name__} exit={code} message={_quote(exc)}", file=sys.stderr)
        except (ValueError, OSError) as exc:
            code = 1
            print(f"error={type(exc).__name__} exit={code} message={_quote(exc)}", file=sys.stderr)
    if not args.quiet:
        for w in caught:
            print(f"warning={w.category.__name__} message={_quote(w.message)}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
