"""Command-line entry point.

Exit codes: 0 success, 1 numerical failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .droplet import DropletFamily, solve_radial_profile
from .errors import ChDropletError
from .experiments import (dump_json, run_coupling, run_exit_time, run_norm_scaling, run_profile_sweep,
                          run_spectral_sweep, setup, simulate_path, write_manifest)
from .fermi import FrameCache, project_to_manifold
from .linearization import LinearizedOperator, leading_eigenpairs, tangent_alignment
from .spectral import Grid, load_field, save_field, save_field_csv

log = logging.getLogger("chdroplet")


class UsageError(Exception):
    pass


def _parser():
    p = argparse.ArgumentParser(prog="chdroplet", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="TOML experiment configuration")
    p.add_argument("--seed", type=int, help="override the configured seed")
    p.add_argument("--out-dir", help="output directory (default: config out_dir)")
    p.add_argument("--threads", type=int, help="worker processes for ensembles")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("profile", help="radial droplet profile for one rescaled radius")
    s.add_argument("--rho", type=float, required=True)

    s = sub.add_parser("droplet", help="droplet field and tangents at a center")
    s.add_argument("--eps", type=float)
    s.add_argument("--xi", type=float, nargs=2)

    s = sub.add_parser("spectrum", help="leading eigenpairs of the linearized operators")
    s.add_argument("--eps", type=float)
    s.add_argument("--count", type=int, default=3)

    s = sub.add_parser("project", help="Fermi coordinates of a stored field")
    s.add_argument("field")
    s.add_argument("--eps", type=float)
    s.add_argument("--xi", type=float, nargs=2, help="initial guess for the center")

    s = sub.add_parser("simulate", help="single SPDE path with trace output")
    s.add_argument("--eps", type=float)
    s.add_argument("--path", type=int, default=0)
    s.add_argument("--horizon", type=float)

    sub.add_parser("exit-time", help="Monte Carlo exit-time ensemble")
    sub.add_parser("coupling", help="SPDE versus reduced-SDE coupling")

    s = sub.add_parser("sweep", help="spectral, profile or norm-scaling sweep")
    s.add_argument("which", choices=["spectral", "profile", "norms"])

    s = sub.add_parser("plot-data", help="convert a stored field to x,y,value CSV")
    s.add_argument("field")
    s.add_argument("--output")
    return p


def _eps(cfg, value):
    return cfg.eps[0] if value is None else value


def _finish(out, args, cfg, outputs, extra=None):
    write_manifest(out, args.command, cfg, outputs, extra)
    print(json.dumps({"out_dir": str(out), "outputs": [Path(o).name for o in outputs]}))


def cmd_profile(args, cfg, out):
    prof = solve_radial_profile(args.rho)
    stem = out / f"profile_rho{args.rho:g}"
    prof.save(stem)
    _finish(out, args, cfg, [f"{stem}.csv", f"{stem}.json"])


def cmd_droplet(args, cfg, out):
    eps = _eps(cfg, args.eps)
    grid = Grid(cfg.n)
    fam = DropletFamily(grid, eps, rho_phys=cfg.rho_phys, xi0=tuple(cfg.xi0), delta=cfg.delta)
    st = fam.build(tuple(args.xi) if args.xi else tuple(cfg.xi0))
    files = [out / "droplet.field", out / "tangent_1.field", out / "tangent_2.field"]
    for f, data in zip(files, (st.field, *st.tangents)):
        save_field(f, data)
    meta = out / "droplet.json"
    dump_json(meta, {"xi": st.xi, "eps": eps, "rho_phys": st.rho_phys, "a": st.a,
                     "mass": grid.integrate(st.field), "energy": grid.energy(st.field, eps)})
    _finish(out, args, cfg, files + [meta])


def cmd_spectrum(args, cfg, out):
    eps = _eps(cfg, args.eps)
    grid = Grid(cfg.n)
    fam = DropletFamily(grid, eps, rho_phys=cfg.rho_phys, xi0=tuple(cfg.xi0), delta=cfg.delta)
    st = fam.build(tuple(cfg.xi0), second=False)
    ch = leading_eigenpairs(LinearizedOperator(grid, st.field, eps), count=args.count)
    ac = leading_eigenpairs(LinearizedOperator(grid, st.field, eps, kind="allen_cahn"), count=args.count)
    files = []
    for i, f in enumerate(ch.fields):
        path = out / f"psi_{i + 1}.field"
        save_field(path, f)
        files.append(path)
    meta = out / "spectrum.json"
    dump_json(meta, {"eps": eps, "cahn_hilliard": ch.to_json(), "allen_cahn": ac.to_json(),
                     "dbar": tangent_alignment(ch, st.tangents, grid)})
    _finish(out, args, cfg, files + [meta])


def cmd_project(args, cfg, out):
    eps = _eps(cfg, args.eps)
    u = load_field(args.field)
    if u.shape != (cfg.n, cfg.n):
        cfg = cfg.replace(n=u.shape[0])
    _, fam, base = setup(cfg, eps)
    cache = FrameCache(fam)
    cache.frames.append(base)
    fd = project_to_manifold(u, cache, tuple(args.xi) if args.xi else tuple(cfg.xi0))
    vpath = out / "transverse.field"
    save_field(vpath, fd.v)
    meta = out / "projection.json"
    dump_json(meta, {"xi": fd.xi, "v_hm1": fd.norm_hm1, "v_l2": fd.norm_l2, "iterations": fd.iterations})
    _finish(out, args, cfg, [vpath, meta])


def cmd_simulate(args, cfg, out):
    eps = _eps(cfg, args.eps)
    rec = simulate_path(cfg, eps, args.path, horizon=args.horizon, keep_series=True)
    trace = out / f"path_{args.path:04d}.csv"
    rec.write_series(trace)
    meta = out / "path.json"
    dump_json(meta, rec.summary_row())
    _finish(out, args, cfg, [trace, meta])


def cmd_exit_time(args, cfg, out):
    results = run_exit_time(cfg, out_dir=out)
    files = [out / f"exit_time_eps{r['eps']:g}.csv" for r in results]
    summary = out / "exit_time_summary.json"
    dump_json(summary, [{k: v for k, v in r.items() if k != "records"} for r in results])
    _finish(out, args, cfg, files + [summary])


def cmd_coupling(args, cfg, out):
    res = run_coupling(cfg, out_dir=out)
    summary = out / "coupling_summary.json"
    dump_json(summary, {k: v for k, v in res.items() if k != "rows"})
    _finish(out, args, cfg, [out / "coupling.csv", summary])


def cmd_sweep(args, cfg, out):
    runner, name = {"spectral": (run_spectral_sweep, "spectral_sweep"),
                    "profile": (run_profile_sweep, "profile_sweep"),
                    "norms": (run_norm_scaling, "norm_scaling")}[args.which]
    res = runner(cfg, out_dir=out)
    summary = out / f"{name}_summary.json"
    dump_json(summary, {k: v for k, v in res.items() if k != "rows"})
    _finish(out, args, cfg, [out / f"{name}.csv", summary])


def cmd_plot_data(args, cfg, out):
    u = load_field(args.field)
    target = Path(args.output) if args.output else out / (Path(args.field).stem + ".csv")
    save_field_csv(target, Grid(u.shape[0], u.shape[1]), u)
    _finish(out, args, cfg, [target])


COMMANDS = {
    "profile": cmd_profile, "droplet": cmd_droplet, "spectrum": cmd_spectrum, "project": cmd_project,
    "simulate": cmd_simulate, "exit-time": cmd_exit_time, "coupling": cmd_coupling,
    "sweep": cmd_sweep, "plot-data": cmd_plot_data,
}


def main(argv=None):
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, threads=args.threads, out_dir=args.out_dir)
        if args.threads is not None and args.threads < 1:
            raise UsageError("--threads must be positive")
    except (OSError, ValueError, TypeError, UsageError) as exc:
        print(f"chdroplet: error: {exc}", file=sys.stderr)
        return 2
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        COMMANDS[args.command](args, cfg, out)
    except (ChDropletError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"chdroplet: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"chdroplet: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
