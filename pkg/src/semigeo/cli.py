"""Batch entry point: config files, presets, runs, refinement, reports.

Configs are plain ``key = value`` text (``#`` starts a comment). A run
writes diagnostics.csv, solver_stats.csv, field dumps, and summary.json
into the output directory; ``--report`` renders figures next to them.
Exit codes: 0 horizon reached, 1 bad configuration, 2 stability halt,
3 solver failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, replace

import numpy as np
import sympy

from .coeffs import build_bundle
from .diagnostics import (mu_lipschitz_constant, verify_energy_estimate,
                          verify_theta_growth, write_diagnostics_csv,
                          write_solver_stats_csv)
from .errors import ConfigError, SemigeoError, StabilityViolation
from .fieldio import load_field, save_field
from .grid import DomainSpec, ScalarField2D, VectorField2D, l2_norm, scalar_field
from .stepper import _SMOOTHED_CURL_TOL, SolverConfig, run, validate_initial

EXIT_BY_STATUS = {"completed": 0, "stability_halt": 2, "solver_failure": 3}

_DOMAINS = ("flat_torus", "torus", "square", "disk", "spherical_cap")

# geometry keys each domain accepts; everything else on the list is an error
_GEOMETRY_KEYS = {
    "flat_torus": ("extent",),
    "torus": ("extent", "V", "phi"),
    "square": ("extent", "V", "phi"),
    "disk": ("radius", "V", "phi"),
    "spherical_cap": ("radius", "omega"),
}
_ALL_GEOMETRY = ("extent", "radius", "omega", "V", "phi")

_INT_KEYS = ("N", "k", "substeps", "elliptic_max_iter", "hodge_max_iter",
             "snapshot_every")
_FLOAT_KEYS = ("tau", "t_final", "stability_margin", "elliptic_tol",
               "hodge_tol")


@dataclass(frozen=True)
class RunManifest:
    """Where a scenario came from and where its outputs go."""

    config_path: str
    output_dir: str
    scenario: str
    geometry: tuple            # (key, value-as-written) pairs
    p0: str                    # "zero" | "file:<abs path>" | expression


def _parse_lines(path):
    try:
        text = open(path).read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(
                f"{path}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not value:
            raise ConfigError(
                f"{path}:{lineno}: empty {'key' if not key else 'value'}")
        if key in entries:
            raise ConfigError(
                f"{path}:{lineno}: duplicate key '{key}' "
                f"(first set on line {entries[key][1]})")
        entries[key] = (value, lineno)
    return entries


def _take(entries, key, parse, required=False, default=None):
    if key not in entries:
        if required:
            raise ConfigError(f"missing required key '{key}'")
        return default
    value, lineno = entries.pop(key)
    try:
        return parse(value)
    except (ValueError, TypeError):
        raise ConfigError(f"key '{key}': cannot parse {value!r} (line {lineno})")


def _parse_expression(text, key):
    x1, x2 = sympy.symbols("x1 x2")
    try:
        expr = sympy.sympify(text, locals={"x1": x1, "x2": x2})
    except (sympy.SympifyError, SyntaxError, TypeError) as e:
        raise ConfigError(f"key '{key}': cannot parse expression {text!r}: {e}")
    extra = expr.free_symbols - {x1, x2}
    if extra:
        names = ", ".join(sorted(str(s) for s in extra))
        raise ConfigError(
            f"key '{key}': unknown symbols {names} in {text!r}; "
            "coordinates are x1 and x2")
    return expr, x1, x2


def _potential_callables(text, key):
    """Expression -> (value, gradient) callables with symbolic derivatives."""
    expr, x1, x2 = _parse_expression(text, key)
    f = sympy.lambdify((x1, x2), expr, "numpy")
    fx = sympy.lambdify((x1, x2), sympy.diff(expr, x1), "numpy")
    fy = sympy.lambdify((x1, x2), sympy.diff(expr, x2), "numpy")

    def value(x, y):
        return np.asarray(f(x, y), dtype=float) + np.zeros_like(x)

    def grad(x, y):
        z = np.zeros_like(x)
        return (np.asarray(fx(x, y), dtype=float) + z,
                np.asarray(fy(x, y), dtype=float) + z)

    return value, grad


def _build_domain(entries):
    domain = _take(entries, "domain", str, required=True)
    if domain not in _DOMAINS:
        raise ConfigError(
            f"unknown domain '{domain}'; choose from {', '.join(_DOMAINS)}")
    allowed = _GEOMETRY_KEYS[domain]
    for key in _ALL_GEOMETRY:
        if key in entries and key not in allowed:
            _, lineno = entries[key]
            raise ConfigError(
                f"key '{key}' does not apply to domain '{domain}' "
                f"(line {lineno})")

    geometry = [("domain", domain)]
    for key in allowed:
        if key in entries:
            geometry.append((key, entries[key][0]))

    pots = {}
    for key in ("V", "phi"):
        if key in entries:
            text = entries.pop(key)[0]
            value, grad = _potential_callables(text, key)
            pots[key] = value
            pots["grad_" + key] = grad

    if domain == "flat_torus":
        extent = _take(entries, "extent", float, default=2.0 * math.pi)
        spec = DomainSpec.flat_torus(extent)
    elif domain == "torus":
        extent = _take(entries, "extent", float, default=2.0 * math.pi)
        spec = DomainSpec.torus(extent, **pots)
    elif domain == "square":
        extent = _take(entries, "extent", float, required=True)
        spec = DomainSpec.square(extent, **pots)
    elif domain == "disk":
        radius = _take(entries, "radius", float, required=True)
        spec = DomainSpec.disk(radius, **pots)
    else:
        radius = _take(entries, "radius", float, required=True)
        omega = _take(entries, "omega", float, default=1.0)
        spec = DomainSpec.spherical_cap(omega, radius)
    return spec, tuple(geometry)


def parse_config(path, output_override=None):
    """Read a scenario file into (SolverConfig, RunManifest)."""
    entries = _parse_lines(path)
    cfg_dir = os.path.dirname(os.path.abspath(path))
    scenario = _take(entries, "scenario", str,
                     default=os.path.splitext(os.path.basename(path))[0])

    spec, geometry = _build_domain(entries)

    N = _take(entries, "N", int, required=True)
    tau = _take(entries, "tau", float, required=True)
    if entries.get("epsilon", ("",))[0] == "tau":
        # coupled smoothing and stepping scales, halved together by refine
        entries.pop("epsilon")
        epsilon = tau
    else:
        epsilon = _take(entries, "epsilon", float, required=True)
    t_final = _take(entries, "t_final", float, required=True)

    opts = {}
    for key in _INT_KEYS[1:]:
        got = _take(entries, key, int)
        if got is not None:
            opts[key] = got
    for key in ("stability_margin", "elliptic_tol", "hodge_tol"):
        got = _take(entries, key, float)
        if got is not None:
            opts[key] = got

    p0 = _take(entries, "p0", str, required=True)
    if p0.startswith("file:"):
        p0 = "file:" + os.path.normpath(
            os.path.join(cfg_dir, p0[len("file:"):]))
    elif p0 != "zero":
        _parse_expression(p0, "p0")       # fail at parse time, not run time

    outdir = _take(entries, "output_dir", str)
    if output_override is not None:
        outdir = os.path.abspath(output_override)
    elif outdir is not None:
        outdir = os.path.normpath(os.path.join(cfg_dir, outdir))
    else:
        outdir = os.path.join(cfg_dir, scenario + ".out")

    if entries:
        key, (_, lineno) = min(entries.items(), key=lambda kv: kv[1][1])
        raise ConfigError(f"unknown key '{key}' (line {lineno})")

    cfg = SolverConfig(spec, N, epsilon=epsilon, tau=tau, t_final=t_final,
                       **opts)
    manifest = RunManifest(os.path.abspath(path), outdir, scenario,
                           geometry, p0)
    return cfg, manifest


def build_initial(p0_spec, grid) -> ScalarField2D:
    """Materialize the initial pressure from its manifest entry."""
    if p0_spec == "zero":
        return scalar_field(grid, np.zeros((grid.N, grid.N)))
    if p0_spec.startswith("file:"):
        field = load_field(p0_spec[len("file:"):], grid)
        if not isinstance(field, ScalarField2D):
            raise ConfigError(
                f"{p0_spec}: initial pressure must be a scalar dump")
        return field
    expr, x1, x2 = _parse_expression(p0_spec, "p0")
    f = sympy.lambdify((x1, x2), expr, "numpy")
    return scalar_field(grid, lambda X, Y: np.asarray(f(X, Y), dtype=float))


def echo_config(cfg, manifest, stream=None):
    stream = stream or sys.stdout
    lines = [f"scenario = {manifest.scenario}"]
    lines += [f"{k} = {v}" for k, v in manifest.geometry]
    lines += [
        f"N = {cfg.N}",
        f"k = {cfg.k}",
        f"epsilon = {cfg.epsilon!r}",
        f"tau = {cfg.tau!r}",
        f"t_final = {cfg.t_final!r}",
        f"substeps = {'auto' if cfg.substeps is None else cfg.substeps}",
        f"stability_margin = {cfg.stability_margin!r}",
        f"elliptic_tol = {cfg.elliptic_tol!r}",
        f"elliptic_max_iter = {cfg.elliptic_max_iter}",
        f"hodge_tol = {cfg.hodge_tol!r}",
        f"hodge_max_iter = {cfg.hodge_max_iter}",
        f"snapshot_every = {cfg.snapshot_every}",
        f"p0 = {manifest.p0}",
        f"output_dir = {manifest.output_dir}",
    ]
    print("\n".join(lines), file=stream)


def _fitted_constants(records):
    fitted = {"theta_growth_C": None, "energy_C": None, "mu_lipschitz": None}
    if len(records) >= 2:
        fitted["mu_lipschitz"] = mu_lipschitz_constant(records)
        try:
            fitted["energy_C"] = verify_energy_estimate(records)
        except ConfigError:
            pass
    if len(records) >= 10:
        try:
            fitted["theta_growth_C"] = verify_theta_growth(records)
        except ConfigError:
            pass
    return fitted


def write_outputs(result, manifest) -> int:
    """Flush every artifact of a finished (or halted) run; returns exit code."""
    outdir = manifest.output_dir
    os.makedirs(outdir, exist_ok=True)
    cfg = result.config
    records = result.records
    outputs = ["diagnostics.csv", "solver_stats.csv", "final_state.sgf"]

    write_diagnostics_csv(records, os.path.join(outdir, "diagnostics.csv"))
    write_solver_stats_csv(records, os.path.join(outdir, "solver_stats.csv"))
    for t, field in result.field_snapshots:
        name = f"state_{int(round(t / cfg.tau)):06d}.sgf"
        save_field(field, os.path.join(outdir, name))
        outputs.append(name)
    save_field(result.grad_p, os.path.join(outdir, "final_state.sgf"))
    try:
        # run states are pre-smoothed; boundary smoothing leaves a small
        # curl residue, so the raw-input gate does not apply here
        bundle = build_bundle(result.grad_p, cfg.mollifier,
                              curl_tol=_SMOOTHED_CURL_TOL)
        save_field(bundle.mu_field, os.path.join(outdir, "mu_field.sgf"))
        outputs.append("mu_field.sgf")
    except SemigeoError:
        pass

    code = EXIT_BY_STATUS[result.status]
    summary = {
        "scenario": manifest.scenario,
        "config_path": manifest.config_path,
        "status": result.status,
        "exit_code": code,
        "halt_reason": result.halt_reason,
        "horizon": {"t_final": cfg.t_final,
                    "reached": result.status == "completed"},
        "steps_completed": max(len(records) - 1, 0),
        "t_reached": records[-1].t if records else 0.0,
        "mu0": records[0].mu if records else None,
        "mu_max": max(r.mu for r in records) if records else None,
        "theta_max": records[-1].theta_max if records else None,
        "fitted": _fitted_constants(records),
        "solver": {
            "total_iterations": sum(r.solver_iters for r in records),
            "max_residual": max((r.solver_residual for r in records),
                                default=0.0),
        },
        "outputs": sorted(outputs),
    }
    with open(os.path.join(outdir, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return code


def run_scenario(cfg, manifest) -> int:
    grid = cfg.grid()
    p0 = build_initial(manifest.p0, grid)
    result = run(p0, cfg)
    code = write_outputs(result, manifest)
    print(f"status = {result.status}")
    if result.halt_reason:
        print(f"halt_reason = {result.halt_reason}")
    t = result.records[-1].t if result.records else 0.0
    print(f"t_reached = {t!r}")
    print(f"outputs -> {manifest.output_dir}")
    return code


def cmd_run(args):
    cfg, manifest = parse_config(args.config, output_override=args.output)
    echo_config(cfg, manifest)
    code = run_scenario(cfg, manifest)
    if args.report:
        from .report import render_report
        for p in render_report(manifest.output_dir):
            print(f"wrote {p}")
    return code


def cmd_validate(args):
    cfg, manifest = parse_config(args.config)
    echo_config(cfg, manifest)
    grid = cfg.grid()
    p0 = build_initial(manifest.p0, grid)
    try:
        _, mu0 = validate_initial(p0, cfg)
    except StabilityViolation as e:
        print(f"inadmissible: {e}")
        return 2
    print(f"initial data admissible: mu0 = {mu0:.6f} < "
          f"{1.0 - cfg.stability_margin:.4f}")
    return 0


def cmd_refine(args):
    if args.levels < 2:
        raise ConfigError(f"refinement needs >= 2 levels, got {args.levels}")
    cfg, manifest = parse_config(args.config, output_override=args.output)
    echo_config(cfg, manifest)
    os.makedirs(manifest.output_dir, exist_ok=True)
    grid = cfg.grid()
    p0 = build_initial(manifest.p0, grid)

    # dyadic family: both the step and the smoothing scale halve per level
    results = []
    for j in range(args.levels):
        cfg_j = replace(cfg, tau=cfg.tau / 2 ** j, epsilon=cfg.epsilon / 2 ** j)
        sub = RunManifest(manifest.config_path,
                          os.path.join(manifest.output_dir, f"level_{j}"),
                          f"{manifest.scenario}-level{j}",
                          manifest.geometry, manifest.p0)
        res = run(p0, cfg_j)
        write_outputs(res, sub)
        results.append((cfg_j, res))
        print(f"level {j}: tau = {cfg_j.tau!r}  status = {res.status}")

    diffs = [None] * args.levels
    ratios = [None] * args.levels
    for j in range(1, args.levels):
        a, b = results[j - 1][1].grad_p, results[j][1].grad_p
        diffs[j] = l2_norm(VectorField2D(b.grid, b.values - a.values))
        if j >= 2 and diffs[j] > 0:
            ratios[j] = diffs[j - 1] / diffs[j]

    table = os.path.join(manifest.output_dir, "refine_table.csv")
    with open(table, "w") as fh:
        fh.write("level,tau,epsilon,status,terminal_diff,ratio\n")
        for j, (cfg_j, res) in enumerate(results):
            cells = [str(j), "%.17g" % cfg_j.tau, "%.17g" % cfg_j.epsilon,
                     res.status,
                     "" if diffs[j] is None else "%.17g" % diffs[j],
                     "" if ratios[j] is None else "%.17g" % ratios[j]]
            fh.write(",".join(cells) + "\n")
    print(f"table -> {table}")
    for j in range(1, args.levels):
        line = f"level {j - 1} -> {j}: |d| = {diffs[j]:.6e}"
        if ratios[j] is not None:
            line += f"  ratio = {ratios[j]:.3f}"
        print(line)

    if args.report:
        from .report import render_report
        for p in render_report(manifest.output_dir):
            print(f"wrote {p}")
    return max(EXIT_BY_STATUS[res.status] for _, res in results)


PRESETS = {
    "flat-torus-wave": """\
# standing wave on the flat periodic box; exact energy conservation
scenario = flat-torus-wave
domain = flat_torus
N = 128
k = 4
epsilon = 0.05
tau = 0.001
t_final = 0.1
snapshot_every = 25
p0 = 0.3*cos(x1) + 0.2*sin(x2)
""",
    "torus-coupled": """\
# dyadic base point for refinement studies: epsilon locked to tau
scenario = torus-coupled
domain = flat_torus
N = 128
k = 4
tau = 0.0015625
epsilon = tau
t_final = 0.1
p0 = 0.3*cos(x1) + 0.2*sin(x2)
""",
    "spherical-cap-smoke": """\
# rotating spherical cap, small tilted initial pressure
scenario = spherical-cap-smoke
domain = spherical_cap
radius = 0.8
omega = 1.0
N = 96
k = 4
epsilon = 0.05
tau = 0.001
t_final = 0.01
p0 = 0.015*x1*x2
""",
    "square-quiet": """\
# small smooth data on a square, Dirichlet walls
scenario = square-quiet
domain = square
extent = 2.0
N = 32
k = 4
epsilon = 0.08
tau = 0.001
t_final = 0.005
p0 = 0.05*sin(x1)*sin(x2)
""",
}


def cmd_presets(args):
    if args.name is None:
        for name, text in sorted(PRESETS.items()):
            desc = text.splitlines()[0].lstrip("# ")
            print(f"{name:22s} {desc}")
        return 0
    if args.name not in PRESETS:
        raise ConfigError(
            f"unknown preset '{args.name}'; run 'sg presets' for the list")
    print(PRESETS[args.name], end="")
    return 0


def cmd_report(args):
    from .report import render_report
    for p in render_report(args.outdir):
        print(f"wrote {p}")
    return 0


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="sg",
        description="semigeostrophic solver and verification harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario to its horizon")
    p.add_argument("config")
    p.add_argument("-o", "--output", default=None,
                   help="output directory (default: from config)")
    p.add_argument("--report", action="store_true",
                   help="render figures after the run")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("refine",
                       help="dyadic (tau, epsilon) self-convergence study")
    p.add_argument("config")
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("-o", "--output", default=None)
    p.add_argument("--report", action="store_true")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("validate",
                       help="parse a config and gate its initial data")
    p.add_argument("config")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("presets", help="list or print built-in scenarios")
    p.add_argument("name", nargs="?", default=None)
    p.set_defaults(func=cmd_presets)

    p = sub.add_parser("report", help="render figures for a finished run")
    p.add_argument("outdir")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1


def console():
    """Script entry point; applies the SG_THREADS cap before any BLAS work."""
    n = os.environ.get("SG_THREADS", "").strip()
    if n:
        try:
            if int(n) < 1:
                raise ValueError
        except ValueError:
            print(f"config error: SG_THREADS must be a positive integer, "
                  f"got {n!r}", file=sys.stderr)
            raise SystemExit(1)
        want = {k: n for k in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                               "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS")}
        if any(os.environ.get(k) != v for k, v in want.items()):
            # thread pools size themselves when the numerics libraries load,
            # which has already happened; restart once with the caps exported
            os.environ.update(want)
            os.execv(sys.executable,
                     [sys.executable, "-m", "semigeo.cli", *sys.argv[1:]])
    raise SystemExit(main())


if __name__ == "__main__":
    console()
