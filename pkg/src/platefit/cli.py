"""Command-line front end.

Subcommands: mesh, forward, modes, synth, fit-local, fit-global,
check-grad.  All experiment inputs live in an INI-style config file
(sections: geometry, material, frequency, noise, fit, trust_region, de,
paths); seeds and worker counts can be overridden on the command line.
Exit codes: 0 success, 2 config error, 3 solver failure, 4 threshold
failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import multiprocessing
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__
from .errors import PlatefitError, SolverError
from .forward import (
    FrequencyResponse,
    MaterialParams,
    afc_peak_indices,
    natural_modes,
    sweep,
)
from .inverse import (
    DEOptions,
    TrustRegionOptions,
    fit_global,
    make_objective,
    relative_errors,
    trust_region_minimize,
)
from .mesh import GeometryConfig, generate_strip_mesh, save_mesh
from .plate_fem import assemble
from .sensitivity import (
    PARAMETRIZATIONS,
    IsotropicParametrization,
    ReferenceData,
    ScaledGlobalParametrization,
    central_difference_gradient,
    central_difference_jacobian,
    loss,
    loss_grad,
    loss_hess,
    synthesize_data,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SOLVER = 3
EXIT_THRESHOLD = 4


class ConfigError(Exception):
    pass


def _fmt(x) -> str:
    return f"{x:.17g}"


def read_config(path) -> configparser.ConfigParser:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    return cp


def _get(cp, section, key, conv=float, default=None, required=False):
    if not cp.has_option(section, key):
        if required:
            raise ConfigError(f"missing [{section}] {key}")
        return default
    raw = cp.get(section, key)
    try:
        if conv is bool:
            return cp.getboolean(section, key)
        return conv(raw)
    except ValueError:
        raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from None


def geometry_from_config(cp) -> GeometryConfig:
    sec = "geometry"
    if not cp.has_section(sec):
        raise ConfigError("missing [geometry] section")
    accel_center = None
    if cp.has_option(sec, "accel_center_x"):
        accel_center = (
            _get(cp, sec, "accel_center_x", required=True),
            _get(cp, sec, "accel_center_y", required=True),
        )
    cfg = GeometryConfig(
        length=_get(cp, sec, "length", required=True),
        width=_get(cp, sec, "width", required=True),
        thickness=_get(cp, sec, "thickness", required=True),
        nx=_get(cp, sec, "nx", int, required=True),
        ny=_get(cp, sec, "ny", int, required=True),
        test_point=(
            _get(cp, sec, "test_point_x", required=True),
            _get(cp, sec, "test_point_y", required=True),
        ),
        accel_center=accel_center,
        accel_radius=_get(cp, sec, "accel_radius", default=0.0),
        accel_mass=_get(cp, sec, "accel_mass", default=0.0),
        clamped_side=_get(cp, sec, "clamped_side", str, default="right"),
    )
    try:
        cfg.validate()
    except PlatefitError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def material_from_config(cp, cfg: GeometryConfig, accel_mode="correct") -> MaterialParams:
    sec = "material"
    if not cp.has_section(sec):
        raise ConfigError("missing [material] section")
    density = _get(cp, sec, "density", required=True)
    poisson = _get(cp, sec, "poisson", required=True)
    beta = _get(cp, sec, "loss_factor", default=0.0)
    if cp.has_option(sec, "rigidity"):
        rigidity = _get(cp, sec, "rigidity")
    elif cp.has_option(sec, "young_modulus"):
        young = _get(cp, sec, "young_modulus")
        e = cfg.half_thickness
        rigidity = 2.0 * young * e**3 / (3.0 * (1.0 - poisson**2))
    else:
        raise ConfigError("need [material] rigidity or young_modulus")
    if accel_mode == "smear":
        plate_mass = density * cfg.length * cfg.width * cfg.thickness
        density = density * (1.0 + cfg.accel_mass / plate_mass)
    try:
        return MaterialParams.isotropic(rigidity, poisson, beta, density, cfg.half_thickness)
    except PlatefitError as exc:
        raise ConfigError(str(exc)) from exc


def frequencies_from_config(cp) -> np.ndarray:
    sec = "frequency"
    f_min = _get(cp, sec, "f_min", default=0.0) if cp.has_section(sec) else 0.0
    f_max = _get(cp, sec, "f_max", required=True) if cp.has_section(sec) else None
    if f_max is None:
        raise ConfigError("missing [frequency] f_max")
    count = _get(cp, sec, "count", int, default=201)
    if count < 2 or f_max <= f_min or f_min < 0:
        raise ConfigError("invalid frequency grid")
    return np.linspace(f_min, f_max, count)


def build_operators(cp, accel_mode="correct"):
    cfg = geometry_from_config(cp)
    if accel_mode in ("ignore", "smear"):
        cfg = GeometryConfig(
            length=cfg.length, width=cfg.width, thickness=cfg.thickness,
            nx=cfg.nx, ny=cfg.ny, test_point=cfg.test_point,
            accel_center=None, accel_radius=0.0, accel_mass=0.0,
            clamped_side=cfg.clamped_side,
        )
    mesh = generate_strip_mesh(cfg)
    density = _get(cp, "material", "density", required=True)
    ops = assemble(mesh, cfg, rho0=density)
    return cfg, mesh, ops


def tr_options_from_config(cp) -> TrustRegionOptions:
    sec = "trust_region"
    opts = TrustRegionOptions(scale="auto")
    if cp.has_section(sec):
        opts.delta_max = _get(cp, sec, "delta_max", default=opts.delta_max)
        opts.delta0 = _get(cp, sec, "delta0", default=opts.delta0)
        opts.eta = _get(cp, sec, "eta", default=opts.eta)
        opts.k_max = _get(cp, sec, "k_max", int, default=opts.k_max)
        opts.gtol = _get(cp, sec, "gtol", default=opts.gtol)
        opts.step_tol = _get(cp, sec, "step_tol", default=opts.step_tol)
        opts.update = _get(cp, sec, "update", str, default=opts.update)
        scale = _get(cp, sec, "scale", str, default="auto")
        opts.scale = None if scale in ("none", "") else scale
    try:
        opts.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return opts


def de_options_from_config(cp, seed_override=None) -> DEOptions:
    sec = "de"
    opts = DEOptions()
    if cp.has_section(sec):
        opts.cr = _get(cp, sec, "cr", default=opts.cr)
        opts.f_min = _get(cp, sec, "f_min", default=opts.f_min)
        opts.f_max = _get(cp, sec, "f_max", default=opts.f_max)
        opts.np_size = _get(cp, sec, "population", int, default=opts.np_size)
        opts.max_fev = _get(cp, sec, "max_fev", int, default=opts.max_fev)
        opts.eps = _get(cp, sec, "eps", default=opts.eps)
        opts.restarts = _get(cp, sec, "restarts", int, default=opts.restarts)
        opts.seed = _get(cp, sec, "seed", int, default=opts.seed)
    if seed_override is not None:
        opts.seed = seed_override
    try:
        opts.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return opts


def _out_dir(args):
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_trace(path, result, k):
    with open(path, "w", newline="") as fh:
        cols = ",".join(f"theta_{i+1}" for i in range(k))
        fh.write(f"iter,loss,{cols}\n")
        if result.theta_trace is not None:
            for i, (f, th) in enumerate(zip(result.loss_trace[-len(result.theta_trace):],
                                            result.theta_trace)):
                vals = ",".join(_fmt(v) for v in th)
                fh.write(f"{i},{_fmt(f)},{vals}\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_mesh(args) -> int:
    cp = read_config(args.config)
    cfg = geometry_from_config(cp)
    mesh = generate_strip_mesh(cfg)
    out = _out_dir(args)
    path = os.path.join(out, "mesh.txt")
    save_mesh(mesh, path)
    print(f"mesh: {mesh.n_nodes} nodes, {mesh.n_triangles} triangles, "
          f"{mesh.n_edges} edges -> {path}")
    if mesh.accel_triangles.size:
        print(f"accelerometer footprint: {mesh.accel_triangles.size} triangles, "
              f"area {_fmt(mesh.accel_area)} m^2")
    return EXIT_OK


def cmd_forward(args) -> int:
    cp = read_config(args.config)
    cfg, mesh, ops = build_operators(cp, args.accel_mode)
    mat = material_from_config(cp, cfg, args.accel_mode)
    freqs = frequencies_from_config(cp)
    afc = sweep(ops, mat, freqs, workers=args.threads)
    out = _out_dir(args)
    path = os.path.join(out, f"afc_{args.accel_mode}.csv")
    afc.to_csv(path)
    peaks = afc.peak_indices()
    print(f"AFC: {freqs.size} frequencies up to {freqs[-1]:g} Hz -> {path}")
    print(f"peaks: {peaks.size} at " + ", ".join(f"{afc.freqs_hz[i]:g} Hz" for i in peaks))
    return EXIT_OK


def cmd_modes(args) -> int:
    cp = read_config(args.config)
    cfg, mesh, ops = build_operators(cp, args.accel_mode)
    mat = material_from_config(cp, cfg, args.accel_mode)
    modes = natural_modes(ops, mat, args.count)
    out = _out_dir(args)
    path = os.path.join(out, "modes.csv")
    with open(path, "w", newline="") as fh:
        fh.write("mode,freq_hz,omega_rad_s,gamma_1_s\n")
        for i, (w, gam) in enumerate(zip(modes.omegas, modes.gammas), start=1):
            fh.write(f"{i},{_fmt(w/(2*np.pi))},{_fmt(w)},{_fmt(gam)}\n")
    print(f"first {args.count} modes -> {path}")
    for i, f_hz in enumerate(modes.freqs_hz, start=1):
        print(f"  mode {i}: {f_hz:.2f} Hz  gamma {modes.gammas[i-1]:.4g} 1/s")
    return EXIT_OK


def cmd_synth(args) -> int:
    cp = read_config(args.config)
    cfg, mesh, ops = build_operators(cp)
    mat = material_from_config(cp, cfg)
    freqs = frequencies_from_config(cp)
    level = _get(cp, "noise", "level", default=0.0) if cp.has_section("noise") else 0.0
    seed = args.seed
    if seed is None and cp.has_section("noise"):
        seed = _get(cp, "noise", "seed", int, default=None)
    param = IsotropicParametrization()
    nu = _get(cp, "material", "poisson", required=True)
    beta = _get(cp, "material", "loss_factor", default=0.0)
    theta_ref = np.array([mat.d[0], nu, beta])
    data = synthesize_data(theta_ref, param, ops, freqs, noise_level=level, seed=seed)
    out = _out_dir(args)
    path = os.path.join(out, "data.csv")
    data.save(path)
    print(f"synthetic data: noise {level}% seed {seed} -> {path} (+ .meta.json)")
    return EXIT_OK


def _fit_report(out, result, thresholds, label) -> int:
    report = {
        "final_theta": [float(v) for v in result.theta],
        "final_loss": float(result.loss),
        "iterations": int(result.n_iter),
        "n_fev": int(result.n_fev),
        "n_gev": int(result.n_gev),
        "n_hev": int(result.n_hev),
        "termination": result.termination,
    }
    if result.relative_errors is not None:
        report["relative_errors"] = [float(v) for v in result.relative_errors]
    if "global_theta" in result.diagnostics:
        report["global_theta"] = [float(v) for v in result.diagnostics["global_theta"]]
        rel_g = result.diagnostics.get("global_relative_errors")
        if rel_g is not None:
            report["global_relative_errors"] = [float(v) for v in rel_g]
        report["restart_losses"] = [float(v) for v in result.diagnostics["restart_losses"]]

    status = EXIT_OK
    if thresholds is not None and result.relative_errors is not None:
        ok = np.all(np.abs(result.relative_errors) <= thresholds)
        report["thresholds"] = [float(v) for v in thresholds]
        report["thresholds_met"] = bool(ok)
        if not ok:
            status = EXIT_THRESHOLD
    path = os.path.join(out, f"{label}_report.json")
    with open(path, "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"{label}: loss {result.loss:.6g}, termination {result.termination} -> {path}")
    if result.relative_errors is not None:
        rel = ", ".join(f"{v:.3g}" for v in result.relative_errors)
        print(f"  relative errors: {rel}")
        if thresholds is not None:
            print("  thresholds " + ("met" if status == EXIT_OK else "NOT met"))
    return status


def _load_data(cp, args) -> ReferenceData:
    path = None
    if cp.has_section("paths") and cp.has_option("paths", "data"):
        path = cp.get("paths", "data")
    if path is None:
        raise ConfigError("missing [paths] data entry pointing at the AFC csv")
    if not os.path.isabs(path):
        # relative entries resolve against --out (where `synth` writes),
        # then against the config file's own directory
        for base in (args.out or ".", os.path.dirname(os.path.abspath(args.config))):
            cand = os.path.join(base, path)
            if os.path.exists(cand):
                path = cand
                break
    if not os.path.exists(path):
        raise ConfigError(f"data file not found: {path}")
    return ReferenceData.load(path)


def _thresholds(cp):
    if cp.has_section("fit") and cp.has_option("fit", "max_rel_errors"):
        vals = [float(v) for v in cp.get("fit", "max_rel_errors").split(",")]
        return np.asarray(vals)
    return None


def cmd_fit_local(args) -> int:
    cp = read_config(args.config)
    cfg, mesh, ops = build_operators(cp)
    data = _load_data(cp, args)
    if not cp.has_option("fit", "theta0"):
        raise ConfigError("missing [fit] theta0 (comma-separated start point)")
    theta0 = np.array([float(v) for v in cp.get("fit", "theta0").split(",")])
    pname = _get(cp, "fit", "parametrization", str, default="isotropic")
    if pname not in PARAMETRIZATIONS:
        raise ConfigError(f"unknown parametrization {pname!r}")
    param = PARAMETRIZATIONS[pname]()
    if theta0.size != param.k:
        raise ConfigError(f"theta0 needs {param.k} entries for {pname}")
    opts = tr_options_from_config(cp)
    bundle = make_objective(param, ops, data)
    theta_ref = data.theta_ref if (
        data.theta_ref is not None and data.theta_ref.size == param.k) else None
    result = trust_region_minimize(bundle, theta0, opts, theta_ref=theta_ref)
    out = _out_dir(args)
    _write_trace(os.path.join(out, "fit_local_trace.csv"), result, param.k)
    return _fit_report(out, result, _thresholds(cp), "fit_local")


_POOL_ENGINE = None


def _pool_eval(theta):
    return _POOL_ENGINE(theta)


def _make_pool_map(global_param, ops, data, workers):
    """Fork-based population evaluation; the engine rides along via fork."""
    from .sensitivity import LossEngine

    global _POOL_ENGINE
    engine = LossEngine(global_param, ops, data)
    _POOL_ENGINE = lambda th: engine.evaluate(th, order=0)
    ctx = multiprocessing.get_context("fork")
    pool = ProcessPoolExecutor(max_workers=workers, mp_context=ctx)

    def map_fn(f, xs):
        return list(pool.map(_pool_eval, xs))

    return pool, map_fn


def cmd_fit_global(args) -> int:
    cp = read_config(args.config)
    cfg, mesh, ops = build_operators(cp)
    data = _load_data(cp, args)
    beta_fixed = _get(cp, "fit", "beta_fixed", default=0.01)
    lo_d = _get(cp, "fit", "rigidity_min", default=1.0)
    hi_d = _get(cp, "fit", "rigidity_max", default=100.0)
    lo_nu = _get(cp, "fit", "poisson100_min", default=0.0)
    hi_nu = _get(cp, "fit", "poisson100_max", default=50.0)
    global_param = ScaledGlobalParametrization(
        beta_fixed=beta_fixed, lower=(lo_d, lo_nu), upper=(hi_d, hi_nu))
    de_opts = de_options_from_config(cp, seed_override=args.seed)
    tr_opts = tr_options_from_config(cp)

    pool = None
    map_fn = None
    if args.threads > 1:
        pool, map_fn = _make_pool_map(global_param, ops, data, args.threads)
    try:
        result = fit_global(data, ops, global_param=global_param,
                            de_opts=de_opts, tr_opts=tr_opts, map_fn=map_fn)
    finally:
        if pool is not None:
            pool.shutdown()
    out = _out_dir(args)
    _write_trace(os.path.join(out, "fit_global_trace.csv"), result, 3)
    with open(os.path.join(out, "fit_global_de_trace.csv"), "w", newline="") as fh:
        fh.write("generation,loss,rigidity,poisson100,max_spread\n")
        for row in result.diagnostics["de_trace"]:
            fh.write(",".join(_fmt(v) for v in row) + "\n")
    return _fit_report(out, result, _thresholds(cp), "fit_global")


def cmd_check_grad(args) -> int:
    cp = read_config(args.config)
    cfg, mesh, ops = build_operators(cp)
    mat = material_from_config(cp, cfg)
    freqs = frequencies_from_config(cp)
    param = IsotropicParametrization()
    nu = _get(cp, "material", "poisson", required=True)
    beta = _get(cp, "material", "loss_factor", default=0.0)
    theta = np.array([mat.d[0], nu, beta])
    if args.theta is not None:
        theta = np.array([float(v) for v in args.theta.split(",")])
    if not param.is_feasible(theta):
        raise ConfigError(f"theta {theta.tolist()} is infeasible (bounds or definiteness)")

    level = _get(cp, "noise", "level", default=1.0) if cp.has_section("noise") else 1.0
    seed = args.seed if args.seed is not None else 1234
    data = synthesize_data(theta, param, ops, freqs, noise_level=max(level, 1.0), seed=seed)

    g = loss_grad(theta, param, ops, data)
    f = lambda th: loss(th, param, ops, data)
    # Richardson-extrapolated central differences; the base step clears
    # the loss evaluation noise floor
    g1 = central_difference_gradient(f, theta, rel=2e-5)
    g2 = central_difference_gradient(f, theta, rel=1e-5)
    g_fd = (4.0 * g2 - g1) / 3.0
    rel_g = np.abs(g - g_fd) / np.abs(g_fd).max()

    H = loss_hess(theta, param, ops, data)
    sym = np.abs(H - H.T).max() / max(np.abs(H).max(), 1e-300)
    H_fd = central_difference_jacobian(lambda th: loss_grad(th, param, ops, data), theta)
    H_fd = 0.5 * (H_fd + H_fd.T)
    rel_h = np.abs(H - H_fd).max() / np.abs(H_fd).max()

    print(f"gradient vs FD: max relative discrepancy {rel_g.max():.3e}")
    print(f"hessian vs FD of gradient: max relative discrepancy {rel_h:.3e}")
    print(f"hessian symmetry residual: {sym:.3e}")
    ok = rel_g.max() < 1e-5 and rel_h < 1e-4 and sym < 1e-10
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_THRESHOLD


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="platefit",
        description="Thin-plate AFC simulation and elastic-moduli identification",
    )
    parser.add_argument("--version", action="version", version=f"platefit {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="INI config file")
        p.add_argument("--out", default=None, help="output directory (default: cwd)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--threads", type=int, default=1, help="worker cap for sweeps/DE")

    p = sub.add_parser("mesh", help="generate and save the strip mesh")
    common(p)
    p.set_defaults(fn=cmd_mesh)

    p = sub.add_parser("forward", help="compute an AFC sweep")
    common(p)
    p.add_argument("--accel-mode", choices=("correct", "ignore", "smear"),
                   default="correct", help="accelerometer handling")
    p.set_defaults(fn=cmd_forward)

    p = sub.add_parser("modes", help="natural frequencies and decay factors")
    common(p)
    p.add_argument("--accel-mode", choices=("correct", "ignore", "smear"),
                   default="correct")
    p.add_argument("--count", type=int, default=6, help="number of modes")
    p.set_defaults(fn=cmd_modes)

    p = sub.add_parser("synth", help="synthesize noisy reference data")
    common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("fit-local", help="trust-region fit from [fit] theta0")
    common(p)
    p.set_defaults(fn=cmd_fit_local)

    p = sub.add_parser("fit-global", help="differential evolution + local polish")
    common(p)
    p.set_defaults(fn=cmd_fit_global)

    p = sub.add_parser("check-grad", help="verify analytic derivatives against FD")
    common(p)
    p.add_argument("--theta", default=None, help="comma-separated (D, nu, beta)")
    p.set_defaults(fn=cmd_check_grad)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except PlatefitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
