"""Experiment harness: solve scattering problems and emit CSV/JSON artifacts
for the study scripts (convergence, resonance scan, static limit, far field).

Every command validates its configuration up front (exit 1 on errors), writes
a manifest echoing the resolved configuration, and returns exit code 2 when
GMRES fails to converge.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import analytic, geometry
from .formulations import (dpie_scalar_system, dpie_vector_system,
                           incident_EH, magnetic_dipole, mfie_system,
                           nrccie_system, plane_wave, solve)
from .layerpot import EMParams, eval_scattered_fields
from .linalg import condition_number, weight_scale
from .postprocess import (far_field_stable, far_field_standard,
                          proxy_currents, tail_monitor)

# GMRES tolerance paired to the interpolation order (tighter rules deserve
# tighter solves)
DEFAULT_GMRES_TOL = {1: 1e-6, 2: 1e-7, 3: 1e-8, 4: 1e-9, 5: 1e-10, 6: 1e-10,
                     7: 1e-12, 8: 1e-13}
FORMULATIONS = ("mfie", "nrccie", "dpie")
DENSE_LIMIT = 9000        # unknown count above which solves go matrix-free


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    command: str = "solve"
    formulation: str = "nrccie"
    geom: str = "sphere"
    order: int = 2
    patches: int = 192
    levels: list = field(default_factory=list)
    k: float = 1.0
    kmin: float = None
    kmax: float = None
    ksteps: int = None
    log: bool = False
    alpha: float = 1.0
    quad_tol: float = 1e-6
    gmres_tol: float = None
    incident: str = "planewave:d=0,0,1:p=1,0,0"
    formula: str = "auto"
    mode: str = "auto"
    ntheta: int = 18
    nphi: int = 36
    out: str = "runs"

    def formulations(self):
        names = [f.strip().lower() for f in self.formulation.split(",")]
        bad = [f for f in names if f not in FORMULATIONS]
        if bad:
            raise ConfigError(f"unknown formulation(s) {bad}; "
                              f"choose from {FORMULATIONS}")
        return names

    def validate(self):
        self.formulations()
        if self.order < 1 or self.order > 8:
            raise ConfigError("order must be in 1..8")
        if self.patches < 2:
            raise ConfigError("patches must be >= 2")
        if self.quad_tol <= 0:
            raise ConfigError("quad-tol must be positive")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.gmres_tol is None:
            self.gmres_tol = DEFAULT_GMRES_TOL.get(self.order, 1e-9)
        if self.command in ("resonance-scan", "static-limit"):
            if self.kmin is None or self.kmax is None or not self.ksteps:
                raise ConfigError(
                    f"{self.command} needs --kmin, --kmax and --ksteps")
            if self.ksteps < 1 or self.kmax < self.kmin or self.kmin <= 0:
                raise ConfigError("empty or invalid k range")
        parse_geometry(self.geom, self.order, self.patches, build=False)
        parse_incident(self.incident)
        return self


def _parse_vec(text, name):
    try:
        v = np.array([float(t) for t in text.split(",")], dtype=float)
    except ValueError:
        raise ConfigError(f"cannot parse {name}={text!r}")
    if v.shape != (3,):
        raise ConfigError(f"{name} needs three comma-separated numbers")
    return v


def parse_incident(spec):
    """'planewave:d=0,0,1:p=1,0,0' or 'dipole:x0=..:m=..' -> IncidentField."""
    parts = spec.split(":")
    kind, opts = parts[0].lower(), {}
    for p in parts[1:]:
        if "=" not in p:
            raise ConfigError(f"bad incident option {p!r}")
        key, val = p.split("=", 1)
        opts[key] = val
    try:
        if kind == "planewave":
            d = _parse_vec(opts.get("d", "0,0,1"), "d")
            p = _parse_vec(opts.get("p", "1,0,0"), "p")
            a = float(opts.get("amplitude", "1"))
            return plane_wave(d, a * p)
        if kind == "dipole":
            return magnetic_dipole(_parse_vec(opts.get("x0", "0,0,0"), "x0"),
                                   _parse_vec(opts.get("m", "0,0,1"), "m"))
    except ValueError as e:
        raise ConfigError(str(e))
    raise ConfigError(f"unknown incident kind {kind!r}")


def parse_geometry(spec, order, patches, build=True):
    """'sphere' | 'torus[:R=..:r=..:nu=..:nv=..]' | 'file:PATH' -> Mesh."""
    parts = spec.split(":")
    kind = parts[0].lower()
    if kind == "sphere":
        if len(parts) > 1:
            raise ConfigError("sphere takes no options (use --patches)")
        return geometry.unit_sphere_mesh(patches, order) if build else None
    if kind == "torus":
        opts = {}
        for p in parts[1:]:
            if "=" not in p:
                raise ConfigError(f"bad torus option {p!r}")
            key, val = p.split("=", 1)
            opts[key] = val
        try:
            R = float(opts.get("R", "2"))
            r = float(opts.get("r", "0.5"))
            nu = int(opts.get("nu", "8"))
            nv = int(opts.get("nv", "4"))
        except ValueError as e:
            raise ConfigError(str(e))
        if build:
            return geometry.torus_mesh(R, r, nu, nv, order)
        return None
    if kind == "file":
        if len(parts) != 2 or not parts[1]:
            raise ConfigError("file geometry needs file:PATH")
        if build:
            return geometry.load_mesh(parts[1])
        if not Path(parts[1]).exists():
            raise ConfigError(f"mesh file not found: {parts[1]}")
        return None
    raise ConfigError(f"unknown geometry {kind!r}")


# ---------------------------------------------------------------------------
# shared pipeline pieces

def probe_points(mesh, n=200, factor=3.0):
    """Quasi-uniform exterior probes on a sphere of 3x the bounding radius."""
    R = float(np.linalg.norm(mesh.nodes.x, axis=1).max())
    i = np.arange(n)
    phi = np.pi * (3 - np.sqrt(5)) * i
    z = 1 - 2 * (i + 0.5) / n
    s = np.sqrt(1 - z * z)
    return factor * R * np.stack([s * np.cos(phi), s * np.sin(phi), z], 1)


def reference_scattered(incident, geom, params, targets):
    """Exact scattered field when one is known: Mie for plane-wave scattering
    from the unit sphere, extinction (-incident) for an interior source."""
    if incident.kind == "magnetic_dipole":
        E, H = analytic.dipole_exact(incident.location, incident.moment,
                                     params, targets)
        return -E, -H
    if geom.split(":")[0].lower() == "sphere" \
            and np.abs(incident.polarization.imag).max() == 0:
        return analytic.mie_scattered(1.0, params,
                                      incident.polarization.real, targets,
                                      direction=incident.direction)
    return None


def solve_formulation(name, mesh, params, cfg, incident, mode=None):
    """Assemble + GMRES one formulation; returns a result dict."""
    if mode is None:
        mode = cfg.mode
    if mode == "auto":
        n_unknowns = {"mfie": 2, "nrccie": 3, "dpie": 3}[name] * mesh.n_nodes
        mode = "dense" if n_unknowns <= DENSE_LIMIT else "matrix-free"
    t0 = time.perf_counter()
    logs = []
    if name == "mfie":
        sys_ = mfie_system(mesh, params, cfg.quad_tol, incident=incident,
                           mode=mode)
        sol, log = solve(sys_, tol=cfg.gmres_tol)
        logs.append(log)
        densities = {"J": sol["J"].values}
        rep, alpha, tails = "MFIE-potentials", None, [sol["J"]]
    elif name == "nrccie":
        sys_ = nrccie_system(mesh, params, cfg.quad_tol, alpha=cfg.alpha,
                             incident=incident, mode=mode)
        sol, log = solve(sys_, tol=cfg.gmres_tol)
        logs.append(log)
        densities = {"J": sol["J"].values, "rho": sol["rho"].values}
        rep, alpha, tails = "NRCCIE-potentials", None, [sol["J"]]
    elif name == "dpie":
        sys_v = dpie_vector_system(mesh, params, cfg.quad_tol,
                                   alpha=cfg.alpha, incident=incident,
                                   mode=mode)
        sol_v, log_v = solve(sys_v, tol=cfg.gmres_tol)
        sys_s = dpie_scalar_system(mesh, params, cfg.quad_tol,
                                   alpha=cfg.alpha, incident=incident,
                                   mode=mode)
        sol_s, log_s = solve(sys_s, tol=cfg.gmres_tol)
        logs.extend([log_v, log_s])
        densities = {"a": sol_v["a"].values, "rho": sol_v["rho"].values,
                     "sigma": sol_s["sigma"].values}
        rep, alpha, tails = "DPIE", cfg.alpha, [sol_v["a"]]
    else:
        raise ConfigError(f"unknown formulation {name!r}")
    wall = time.perf_counter() - t0
    eps_tail = max((tail_monitor(d).relative for d in tails), default=0.0)
    return dict(representation=rep, densities=densities, alpha=alpha,
                logs=logs, n_iter=sum(lg.iterations for lg in logs),
                wall_time=wall, eps_tail=eps_tail, mode=mode)


def field_error(result, mesh, params, cfg, incident):
    """eps_a = max of relative L2 errors of E and H at the exterior probes
    (nan when no reference solution applies)."""
    tg = probe_points(mesh)
    ref = reference_scattered(incident, cfg.geom, params, tg)
    if ref is None:
        return float("nan")
    samples = eval_scattered_fields(result["representation"],
                                    result["densities"], mesh, params, tg,
                                    eps_quad=cfg.quad_tol,
                                    alpha=result["alpha"])
    E = np.array([s.E for s in samples])
    H = np.array([s.H for s in samples])
    Eref, Href = ref
    eE = np.linalg.norm(E - Eref) / np.linalg.norm(Eref)
    eH = np.linalg.norm(H - Href) / np.linalg.norm(Href)
    return float(max(eE, eH))


def build_dense_system(name, mesh, params, cfg):
    if name == "mfie":
        return mfie_system(mesh, params, cfg.quad_tol)
    if name == "nrccie":
        return nrccie_system(mesh, params, cfg.quad_tol, alpha=cfg.alpha)
    return dpie_vector_system(mesh, params, cfg.quad_tol, alpha=cfg.alpha)


def system_condition(name, mesh, params, cfg):
    """Condition number of the weight-scaled dense system matrix."""
    sys_ = build_dense_system(name, mesh, params, cfg)
    w = sys_.weights()
    A = weight_scale(sys_.matrix, w[:len(w) - sys_.n_constants],
                     sys_.n_constants)
    return condition_number(A)


# ---------------------------------------------------------------------------
# artifact helpers

def _fmt(x):
    if isinstance(x, float):
        return f"{x:.17g}"
    return str(x)


def write_csv(path, header, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(x) for x in row) + "\n")
    return path


def code_hash():
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def write_manifest(outdir, cfg, results):
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    doc = dict(config=asdict(cfg), code_hash=code_hash(), results=results)
    path = outdir / "manifest.json"
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, default=str)
    return path


def fit_slope(h, err):
    """Least-squares slope of log10(err) vs log10(h)."""
    h, err = np.asarray(h, dtype=float), np.asarray(err, dtype=float)
    keep = np.isfinite(err) & (err > 0)
    if keep.sum() < 2:
        return float("nan")
    return float(np.polyfit(np.log10(h[keep]), np.log10(err[keep]), 1)[0])


def mesh_h(mesh):
    """Representative patch diameter."""
    return float(np.sqrt(mesh.area() / mesh.n_patches))


def mesh_for_level(cfg, lev):
    """Sphere levels are patch counts; other geometries treat the level as a
    number of uniform refinements of the base mesh."""
    if cfg.geom.split(":")[0].lower() == "sphere":
        return parse_geometry(cfg.geom, cfg.order, lev)
    mesh = parse_geometry(cfg.geom, cfg.order, cfg.patches)
    for _ in range(lev):
        mesh = geometry.refine_all(mesh)
    return mesh


# ---------------------------------------------------------------------------
# commands

def cmd_solve(cfg):
    out = Path(cfg.out)
    mesh = parse_geometry(cfg.geom, cfg.order, cfg.patches)
    params = EMParams.from_k(cfg.k)
    incident = parse_incident(cfg.incident)
    result = solve_formulation(cfg.formulations()[0], mesh, params, cfg,
                               incident)
    eps_a = field_error(result, mesh, params, cfg, incident)

    rows = []
    for j, log in enumerate(result["logs"]):
        rows.extend((j, i, r) for i, r in enumerate(log.residuals))
    write_csv(out / "iterations.csv", ["system", "iteration", "residual"],
              rows)
    mon = tail_monitor(_primary_density(result, mesh))
    write_csv(out / "tail.csv", ["patch", "delta", "eps"],
              [(j, d, e) for j, (d, e) in
               enumerate(zip(mon.delta, mon.eps))])
    with open(out / "solution.json", "w") as f:
        json.dump({k: {"re": np.real(v).tolist(), "im": np.imag(v).tolist()}
                   for k, v in result["densities"].items()}, f)
    write_manifest(out, cfg, dict(
        eps_a=eps_a, eps_tail=result["eps_tail"], n_iter=result["n_iter"],
        wall_time=result["wall_time"], mode=result["mode"],
        mesh_hash=mesh.content_hash()))
    print(f"eps_a={eps_a:.3e} eps_tail={result['eps_tail']:.3e} "
          f"iters={result['n_iter']} wall={result['wall_time']:.1f}s")
    return 0


def _primary_density(result, mesh):
    from .formulations import SurfaceDensity
    key = "a" if result["representation"] == "DPIE" else "J"
    return SurfaceDensity(mesh, "tangential", result["densities"][key])


def _levels(cfg):
    if cfg.levels:
        return list(cfg.levels)
    return [cfg.patches]


def cmd_convergence(cfg):
    out = Path(cfg.out)
    params = EMParams.from_k(cfg.k)
    incident = parse_incident(cfg.incident)
    results = {}
    for name in cfg.formulations():
        rows, res_rows = [], []
        for lev in _levels(cfg):
            mesh = mesh_for_level(cfg, lev)
            res = solve_formulation(name, mesh, params, cfg, incident)
            eps_a = field_error(res, mesh, params, cfg, incident)
            rows.append((lev, mesh_h(mesh), eps_a, res["eps_tail"],
                         res["n_iter"], res["wall_time"]))
            for j, log in enumerate(res["logs"]):
                res_rows.extend((lev, j, i, r)
                                for i, r in enumerate(log.residuals))
            print(f"{name} level={lev} eps_a={eps_a:.3e} "
                  f"eps_tail={res['eps_tail']:.3e} iters={res['n_iter']} "
                  f"wall={res['wall_time']:.1f}s", flush=True)
        write_csv(out / f"convergence_{name}_order{cfg.order}.csv",
                  ["level", "h", "eps_a", "eps_tail", "n_iter", "wall_time"],
                  rows)
        write_csv(out / f"residuals_{name}_order{cfg.order}.csv",
                  ["level", "system", "iteration", "residual"], res_rows)
        slope = fit_slope([r[1] for r in rows], [r[2] for r in rows]) \
            if len(rows) > 1 else float("nan")
        results[name] = dict(slope=slope, rows=[list(r) for r in rows])
    write_manifest(out, cfg, results)
    return 0


def cmd_resonance_scan(cfg):
    out = Path(cfg.out)
    ks = np.linspace(cfg.kmin, cfg.kmax, cfg.ksteps)
    names = cfg.formulations()
    rows = []
    for k in ks:
        params = EMParams.from_k(float(k))
        mesh = parse_geometry(cfg.geom, cfg.order, cfg.patches)
        conds = [system_condition(n, mesh, params, cfg) for n in names]
        rows.append((float(k), *conds))
        print(f"k={k:.6g} " + " ".join(
            f"cond_{n}={c:.6g}" for n, c in zip(names, conds)), flush=True)
    write_csv(out / "resonance.csv",
              ["k"] + [f"cond_{n}" for n in names], rows)
    results = {}
    arr = np.array([r[1:] for r in rows], dtype=float)
    for j, n in enumerate(names):
        results[n] = dict(k_peak=float(ks[np.argmax(arr[:, j])]),
                          cond_max=float(arr[:, j].max()),
                          cond_min=float(arr[:, j].min()))
    write_manifest(out, cfg, results)
    return 0


def cmd_static_limit(cfg):
    out = Path(cfg.out)
    incident = parse_incident(cfg.incident)
    ks = (np.geomspace if cfg.log else np.linspace)(
        cfg.kmin, cfg.kmax, cfg.ksteps)
    names = cfg.formulations()
    rows = []
    for lev in _levels(cfg):
        mesh = mesh_for_level(cfg, lev)
        for k in ks:
            params = EMParams.from_k(float(k))
            errs = []
            for name in names:
                res = solve_formulation(name, mesh, params, cfg, incident)
                errs.append(field_error(res, mesh, params, cfg, incident))
            rows.append((float(k), lev, *errs))
            print(f"k={k:.3e} level={lev} " + " ".join(
                f"eps_{n}={e:.3e}" for n, e in zip(names, errs)), flush=True)
    write_csv(out / "static_limit.csv",
              ["k", "level"] + [f"eps_a_{n}" for n in names], rows)
    results = {}
    arr = np.array([r[2:] for r in rows], dtype=float)
    if len(_levels(cfg)) == 1:
        for j, n in enumerate(names):
            results[n] = dict(
                slope=fit_slope(ks, arr[:, j]),
                ratio=float(np.nanmax(arr[:, j]) / np.nanmin(arr[:, j])))
    write_manifest(out, cfg, results)
    return 0


def cmd_farfield(cfg):
    out = Path(cfg.out)
    mesh = parse_geometry(cfg.geom, cfg.order, cfg.patches)
    params = EMParams.from_k(cfg.k)
    incident = parse_incident(cfg.incident)
    result = solve_formulation(cfg.formulations()[0], mesh, params, cfg,
                               incident)
    R = float(np.linalg.norm(mesh.nodes.x, axis=1).max())
    proxy = proxy_currents(dict(representation=result["representation"],
                                densities=result["densities"],
                                alpha=result["alpha"]),
                           mesh, params, radius=2.0 * R,
                           eps_quad=cfg.quad_tol)
    theta = np.pi * (np.arange(cfg.ntheta) + 0.5) / cfg.ntheta
    phi = 2 * np.pi * np.arange(cfg.nphi) / cfg.nphi
    T, P = np.meshgrid(theta, phi, indexing="ij")
    dirs = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P),
                     np.cos(T)], axis=-1).reshape(-1, 3)
    formula = cfg.formula
    if formula == "auto":
        # use the cancellation-free form for sub-half-wavelength scatterers
        formula = "stable" if 2 * R < 0.5 * (2 * np.pi / params.k) \
            else "standard"
    ff = (far_field_stable if formula == "stable"
          else far_field_standard)(proxy, dirs)
    mag = np.sqrt(np.abs(ff.E_theta) ** 2 + np.abs(ff.E_phi) ** 2)
    with np.errstate(divide="ignore"):
        db = 20 * np.log10(mag)
    rows = [(np.degrees(t), np.degrees(p), et.real, et.imag, ep.real,
             ep.imag, d)
            for (t, p), et, ep, d in zip(
                np.stack([T.ravel(), P.ravel()], 1), ff.E_theta, ff.E_phi,
                db)]
    write_csv(out / "farfield.csv",
              ["theta_deg", "phi_deg", "Re_E_theta", "Im_E_theta",
               "Re_E_phi", "Im_E_phi", "mag_dB"], rows)
    results = dict(formula=formula, radius=2.0 * R, n_iter=result["n_iter"])
    mie_ref = reference_scattered(incident, cfg.geom, params, dirs[:1])
    if incident.kind == "plane_wave" and mie_ref is not None:
        Fref = analytic.mie_far_field(1.0, params,
                                      incident.polarization.real, dirs,
                                      direction=incident.direction)
        err = np.linalg.norm(ff.E_cartesian() - Fref) / np.linalg.norm(Fref)
        results["mie_relative_error"] = float(err)
    write_manifest(out, cfg, results)
    print(f"far field ({formula}) written; "
          + (f"mie err {results.get('mie_relative_error'):.3e}"
             if "mie_relative_error" in results else ""))
    return 0


def cmd_mesh(cfg):
    out = Path(cfg.out)
    mesh = parse_geometry(cfg.geom, cfg.order, cfg.patches)
    out.mkdir(parents=True, exist_ok=True)
    geometry.save_mesh(mesh, out / "mesh.txt")
    info = dict(n_patches=mesh.n_patches, n_nodes=mesh.n_nodes,
                order=mesh.order, area=mesh.area(),
                volume=mesh.signed_volume(),
                content_hash=mesh.content_hash())
    write_manifest(out, cfg, info)
    print(json.dumps(info, indent=2))
    return 0


COMMANDS = {
    "solve": cmd_solve,
    "convergence": cmd_convergence,
    "resonance-scan": cmd_resonance_scan,
    "static-limit": cmd_static_limit,
    "farfield": cmd_farfield,
    "mesh": cmd_mesh,
}


def build_parser():
    ap = argparse.ArgumentParser(
        prog="embie",
        description="boundary-integral scattering experiment harness")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file (flags override)")
        p.add_argument("--formulation",
                       help="mfie|nrccie|dpie (comma list for sweeps)")
        p.add_argument("--geom", help="sphere | torus[:R=..:r=..:nu=..:nv=..]"
                                      " | file:PATH")
        p.add_argument("--order", type=int)
        p.add_argument("--patches", type=int)
        p.add_argument("--levels", help="comma list of patch counts")
        p.add_argument("--k", type=float)
        p.add_argument("--kmin", type=float)
        p.add_argument("--kmax", type=float)
        p.add_argument("--ksteps", type=int)
        p.add_argument("--log", action="store_true", default=None)
        p.add_argument("--alpha", type=float)
        p.add_argument("--quad-tol", type=float, dest="quad_tol")
        p.add_argument("--gmres-tol", type=float, dest="gmres_tol")
        p.add_argument("--incident")
        p.add_argument("--formula", choices=["standard", "stable", "auto"])
        p.add_argument("--mode", choices=["auto", "dense", "matrix-free"])
        p.add_argument("--ntheta", type=int)
        p.add_argument("--nphi", type=int)
        p.add_argument("--out")
    return ap


def config_from_args(args):
    cfg = RunConfig(command=args.command)
    if args.config:
        try:
            with open(args.config) as f:
                file_cfg = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config file: {e}")
        for key, val in file_cfg.items():
            if not hasattr(cfg, key):
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, key, val)
    for key in vars(cfg):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    if isinstance(cfg.levels, str):
        try:
            cfg.levels = [int(t) for t in cfg.levels.split(",") if t]
        except ValueError:
            raise ConfigError(f"bad --levels {cfg.levels!r}")
    return cfg.validate()


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = config_from_args(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    try:
        return COMMANDS[cfg.command](cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except RuntimeError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
