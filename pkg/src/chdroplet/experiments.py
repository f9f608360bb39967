"""Monte Carlo exit-time ensembles, the SPDE / reduced-SDE coupling run and sweeps."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy
from scipy import stats

from . import __version__
from .config import SCHEMA_VERSION, ExperimentConfig
from .droplet import DropletFamily, solve_radial_profile
from .errors import ChDropletError, Diverged, NewtonDiverged, NotInTube, OutOfDomain
from .fermi import FrameCache, compute_frame, drift_vector, project_to_manifold, reduced_sde_step
from .linearization import LinearizedOperator, leading_eigenpairs, tangent_alignment
from .spde import NoiseSpec, SolverConfig, Stepper, rng_for, sample_increment
from .spectral import Grid

log = logging.getLogger(__name__)

# counter value reserved for initial-data draws (never reached by time steps)
INITIAL_DATA_STEP = 2**63


def clopper_pearson(k, n, level=0.95):
    """Exact binomial confidence interval for k successes out of n."""
    a = 1.0 - level
    lo = 0.0 if k == 0 else float(stats.beta.ppf(a / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - a / 2, k + 1, n - k))
    return lo, hi


# -- shared deterministic setup ---------------------------------------------------

_SETUP: dict = {}


def setup(cfg: ExperimentConfig, eps, order=2):
    """Grid, droplet family and base eigen frame; cached per process.

    The cache only memoizes pure functions of the configuration, so results
    do not depend on which paths a worker happened to run before.
    """
    key = (cfg.n, float(eps), cfg.rho_phys, tuple(cfg.xi0), cfg.delta, order)
    if key not in _SETUP:
        grid = Grid(cfg.n)
        fam = DropletFamily(grid, eps, rho_phys=cfg.rho_phys, xi0=tuple(cfg.xi0), delta=cfg.delta)
        base = compute_frame(fam, tuple(cfg.xi0), order=order)
        _SETUP[key] = (grid, fam, base)
    return _SETUP[key]


def _cache_with(fam, base):
    cache = FrameCache(fam, order=base.order)
    cache.frames.append(base)
    return cache


def random_transverse(grid, psi, size, rng, decay=1.0):
    """Smooth random zero-mean field, H^-1-orthogonal to ``psi``, of H^-1 norm ``size``."""
    mu = grid.mu
    with np.errstate(divide="ignore"):
        weight = np.where(mu > 0, mu ** (-decay / 2.0), 0.0)
    c = rng.standard_normal(grid.shape) * weight
    w = grid.inverse(c)
    for p in psi:
        w = w - grid.inner_hm1(w, p) * p
    w = w - grid.mean(w)
    nrm = np.sqrt(grid.inner_hm1(w, w))
    return w * (size / nrm)


# -- exit-time ensembles ----------------------------------------------------------

@dataclass
class PathRecord:
    path: int
    seed: int
    eps: float
    eta0: float
    times: list = field(default_factory=list)
    xi: list = field(default_factory=list)
    v_hm1: list = field(default_factory=list)
    v_l2: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    mass: list = field(default_factory=list)
    tau: float = np.nan
    reason: str = "none"
    detail: str = ""

    @property
    def exited(self):
        return self.reason != "none"

    def summary_row(self):
        return {
            "path": self.path, "seed": self.seed, "eps": self.eps, "eta0": self.eta0,
            "tau": self.tau, "reason": self.reason,
            "max_v_hm1": max(self.v_hm1) if self.v_hm1 else np.nan,
            "max_v_l2": max(self.v_l2) if self.v_l2 else np.nan,
            "final_xi_x": self.xi[-1][0] if self.xi else np.nan,
            "final_xi_y": self.xi[-1][1] if self.xi else np.nan,
            "detail": self.detail,
        }

    def write_series(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "xi_x", "xi_y", "v_hm1", "v_l2", "energy", "mass"])
            for row in zip(self.times, self.xi, self.v_hm1, self.v_l2, self.energy, self.mass):
                t, xi, a, b, e, m = row
                w.writerow([repr(t), repr(xi[0]), repr(xi[1]), repr(a), repr(b), repr(e), repr(m)])


def _interpolate_exit(t0, n0, t1, n1, radius):
    if n1 == n0:
        return t1
    s = (radius - n0) / (n1 - n0)
    return float(t0 + np.clip(s, 0.0, 1.0) * (t1 - t0))


def simulate_path(cfg: ExperimentConfig, eps, path, eta0=None, horizon=None, keep_series=True):
    """One SPDE path from perturbed droplet data, stopped at the first tube exit."""
    grid, fam, base = setup(cfg, eps)
    cache = _cache_with(fam, base)
    eta0 = cfg.eta0(eps) if eta0 is None else eta0
    T = cfg.horizon(eps) if horizon is None else horizon
    noise = NoiseSpec.power_law(grid, eta0, exponent=cfg.noise_decay, mu_cut=cfg.mu_cut, seed=cfg.seed)
    solver = SolverConfig(eps=eps, dt=cfg.dt, T=T, n=cfg.n, kappa=cfg.kappa, diag_every=cfg.diag_every)
    stepper = Stepper(grid, solver)
    rec = PathRecord(path=path, seed=cfg.seed, eps=eps, eta0=eta0)
    radius = cfg.tube_radius(eps)
    l2_radius = cfg.l2_radius(eps)

    rng0 = rng_for(cfg.seed, path, INITIAL_DATA_STEP)
    xi = tuple(cfg.xi0)
    u = fam.field(xi) + random_transverse(grid, base.psi, cfg.nu * eps**4, rng0)

    def record(t, xi, nh, nl, u):
        if keep_series or not rec.times:
            rec.times.append(t)
            rec.xi.append(tuple(xi))
            rec.v_hm1.append(nh)
            rec.v_l2.append(nl)
            rec.energy.append(grid.energy(u, eps))
            rec.mass.append(grid.integrate(u))
        else:
            rec.times[-1:] = [t]
            rec.xi[-1:] = [tuple(xi)]
            rec.v_hm1[-1:] = [max(nh, rec.v_hm1[-1])]
            rec.v_l2[-1:] = [max(nl, rec.v_l2[-1])]

    fd = project_to_manifold(u, cache, xi, second=False)
    xi = fd.xi
    record(0.0, xi, fd.norm_hm1, fd.norm_l2, u)
    t_prev, n_prev, l_prev = 0.0, fd.norm_hm1, fd.norm_l2
    steps = solver.steps
    for k in range(steps):
        dW = sample_increment(noise, cfg.dt, path=path, step=k)
        try:
            u = stepper.step(u, dW)
        except Diverged as exc:
            rec.tau, rec.reason, rec.detail = (k + 1) * cfg.dt, "diverged", str(exc)
            break
        if (k + 1) % cfg.diag_every and k + 1 != steps:
            continue
        t = (k + 1) * cfg.dt
        try:
            fd = project_to_manifold(u, cache, xi, second=False)
        except OutOfDomain as exc:
            rec.tau, rec.reason, rec.detail = t, "boundary", str(exc)
            break
        except (NotInTube, NewtonDiverged) as exc:
            # far outside any tube: report the distance to the last droplet
            w = u - fam.field(xi, check=False)
            nh = float(np.sqrt(grid.inner_hm1(w, w)))
            record(t, xi, nh, grid.norm_l2(w), u)
            rec.tau, rec.reason, rec.detail = t, "hm1_tube", f"projection failed: {exc}"
            break
        xi = fd.xi
        record(t, xi, fd.norm_hm1, fd.norm_l2, u)
        if fd.norm_hm1 > radius:
            rec.tau = _interpolate_exit(t_prev, n_prev, t, fd.norm_hm1, radius)
            rec.reason = "hm1_tube"
            break
        if l2_radius is not None and fd.norm_l2 > l2_radius:
            rec.tau = _interpolate_exit(t_prev, l_prev, t, fd.norm_l2, l2_radius)
            rec.reason = "l2_tube"
            break
        t_prev, n_prev, l_prev = t, fd.norm_hm1, fd.norm_l2
    if not rec.exited:
        rec.tau = steps * cfg.dt
    return rec


def _path_job(args):
    cfg_dict, eps, path, eta0, horizon, keep = args
    return simulate_path(ExperimentConfig.from_dict(cfg_dict), eps, path, eta0, horizon, keep)


def _map(fn, jobs, threads):
    """Order-preserving map, optionally over a process pool."""
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))


def run_exit_time(cfg: ExperimentConfig, out_dir=None, eta0=None, horizon=None, keep_series=False):
    """Ensemble of exit times per eps; returns a JSON-ready summary."""
    results = []
    for eps in cfg.eps:
        e0 = cfg.eta0(eps) if eta0 is None else eta0
        T = cfg.horizon(eps) if horizon is None else horizon
        jobs = [(cfg.to_dict(), eps, p, e0, T, keep_series) for p in range(cfg.paths)]
        records = _map(_path_job, jobs, cfg.threads)
        exits = sum(r.exited for r in records)
        lo, hi = clopper_pearson(exits, len(records))
        summary = {
            "eps": eps, "eta0": e0, "horizon": T, "horizon_uncapped": eps**-cfg.horizon_power,
            "horizon_capped": T < eps**-cfg.horizon_power,
            "tube_radius": cfg.tube_radius(eps), "l2_radius": cfg.l2_radius(eps),
            "paths": len(records), "exits": exits, "exit_fraction": exits / len(records),
            "ci95": [lo, hi],
            "reasons": {r: sum(rec.reason == r for rec in records) for r in sorted({x.reason for x in records})},
            "max_v_hm1": float(max(max(r.v_hm1) for r in records)),
        }
        if out_dir is not None:
            out = Path(out_dir)
            out.mkdir(parents=True, exist_ok=True)
            write_rows(out / f"exit_time_eps{eps:g}.csv", [r.summary_row() for r in records])
            if keep_series:
                for r in records:
                    r.write_series(out / f"path_eps{eps:g}_{r.path:04d}.csv")
        summary["records"] = records
        results.append(summary)
    return results


# -- coupling -----------------------------------------------------------------------

def coupled_path(cfg: ExperimentConfig, eps, path, eta0, T=None, dt=None):
    """Shared-noise run of the SPDE and the reduced SDE for the center.

    The reduced SDE is integrated twice: with coefficients fed by the
    transverse part v of the projected SPDE state, and with v = 0.
    """
    grid, fam, base = setup(cfg, eps)
    cache = _cache_with(fam, base)
    T = cfg.coupling_T if T is None else T
    dt = cfg.coupling_dt if dt is None else dt
    noise = NoiseSpec.power_law(grid, eta0, exponent=cfg.noise_decay, mu_cut=cfg.mu_cut, seed=cfg.seed)
    solver = SolverConfig(eps=eps, dt=dt, T=T, n=cfg.n, kappa=cfg.kappa)
    stepper = Stepper(grid, solver)
    xi0 = np.array(cfg.xi0, dtype=float)
    u = fam.field(tuple(xi0))
    fd = project_to_manifold(u, cache, tuple(xi0))
    xi_full = np.array(fd.xi)
    xi_fed = xi_full.copy()
    xi_zero = xi_full.copy()

    def coeffs(xi_red, v):
        return drift_vector(cache.local(tuple(xi_red)), noise, mode=cfg.drift_mode, v=v)

    rc_fed = coeffs(xi_fed, fd.v)
    rc_zero = coeffs(xi_zero, None)
    times, full, fed, zero = [0.0], [xi_full.copy()], [xi_fed.copy()], [xi_zero.copy()]
    status = "ok"
    for k in range(solver.steps):
        dW = sample_increment(noise, dt, path=path, step=k)
        u = stepper.step(u, dW)
        try:
            xi_fed = reduced_sde_step(xi_fed, rc_fed, dt, dW, grid, fam)
            xi_zero = reduced_sde_step(xi_zero, rc_zero, dt, dW, grid, fam)
        except OutOfDomain:
            status = "boundary"
            break
        if (k + 1) % cfg.diag_every and k + 1 != solver.steps:
            continue
        try:
            fd = project_to_manifold(u, cache, tuple(xi_full))
        except ChDropletError as exc:
            status = f"tube exit: {type(exc).__name__}"
            break
        xi_full = np.array(fd.xi)
        rc_fed = coeffs(xi_fed, fd.v)
        rc_zero = coeffs(xi_zero, None)
        times.append((k + 1) * dt)
        full.append(xi_full.copy())
        fed.append(xi_fed.copy())
        zero.append(xi_zero.copy())
    full, fed, zero = np.array(full), np.array(fed), np.array(zero)
    disp = np.linalg.norm(full - full[0], axis=1)
    sup_disp = float(disp.max())
    d_fed = float(np.linalg.norm(full - fed, axis=1).max())
    d_zero = float(np.linalg.norm(full - zero, axis=1).max())
    return {
        "path": path, "eta0": eta0, "eps": eps, "status": status, "T": times[-1],
        "sup_displacement": sup_disp, "final_displacement": float(disp[-1]),
        "sup_discrepancy_fed": d_fed, "sup_discrepancy_zero": d_zero,
        "ratio_fed": d_fed / sup_disp if sup_disp > 0 else np.nan,
        "ratio_zero": d_zero / sup_disp if sup_disp > 0 else np.nan,
        "series": {"t": times, "full": full.tolist(), "fed": fed.tolist(), "zero": zero.tolist()},
    }


def _coupling_job(args):
    cfg_dict, eps, path, eta0, T, dt = args
    return coupled_path(ExperimentConfig.from_dict(cfg_dict), eps, path, eta0, T, dt)


def run_coupling(cfg: ExperimentConfig, out_dir=None, T=None, dt=None):
    eps = cfg.eps[0]
    base_eta = cfg.eta0(eps)
    jobs = [(cfg.to_dict(), eps, p, base_eta * f, T, dt) for f in cfg.eta_factors for p in range(cfg.paths)]
    rows = _map(_coupling_job, jobs, cfg.threads)
    by_eta = {}
    for r in rows:
        by_eta.setdefault(r["eta0"], []).append(r)
    rms = {e: float(np.sqrt(np.mean([r["final_displacement"] ** 2 for r in rs]))) for e, rs in by_eta.items()}
    etas = sorted(rms)
    scaling = None
    if len(etas) >= 2:
        lo, hi = etas[0], etas[-1]
        observed = rms[hi] / rms[lo]
        expected = np.sqrt(hi / lo)
        scaling = {"eta_low": lo, "eta_high": hi, "rms_ratio": observed, "expected": float(expected),
                   "relative_error": float(abs(observed / expected - 1.0))}
    summary = {
        "eps": eps, "paths": cfg.paths, "eta_values": etas, "rms_displacement": {repr(e): rms[e] for e in etas},
        "max_ratio_fed": float(np.nanmax([r["ratio_fed"] for r in rows])),
        "max_ratio_zero": float(np.nanmax([r["ratio_zero"] for r in rows])),
        "scaling": scaling, "rows": rows,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(out / "coupling.csv", [{k: v for k, v in r.items() if k != "series"} for r in rows])
    return summary


# -- sweeps --------------------------------------------------------------------------

def spectral_point(cfg: ExperimentConfig, eps, n=None):
    grid = Grid(n or cfg.n)
    fam = DropletFamily(grid, eps, rho_phys=cfg.rho_phys, xi0=tuple(cfg.xi0), delta=cfg.delta)
    st = fam.build(tuple(cfg.xi0), second=False)
    ch = leading_eigenpairs(LinearizedOperator(grid, st.field, eps), count=3)
    ac = leading_eigenpairs(LinearizedOperator(grid, st.field, eps, kind="allen_cahn"), count=3)
    dbar = tangent_alignment(ch, st.tangents, grid)
    lam = ch.eigenvalues
    return {
        "eps": eps, "n": grid.n_x, "lambda1": lam[0], "lambda2": lam[1], "lambda3": lam[2],
        "mu1": ac.eigenvalues[0], "mu2": ac.eigenvalues[1], "mu3": ac.eigenvalues[2], "dbar": dbar,
        "small_ratio": max(abs(lam[0]), abs(lam[1])) / lam[2],
        "lambda3_over_eps": lam[2] / eps, "mu3_over_eps2": ac.eigenvalues[2] / eps**2,
        "max_residual": float(max(ch.residuals.max(), ac.residuals.max())),
    }


def run_spectral_sweep(cfg: ExperimentConfig, out_dir=None):
    rows = []
    for eps in cfg.eps:
        try:
            row = spectral_point(cfg, eps)
            row["pass_small"] = row["small_ratio"] <= 1e-3
            row["error"] = ""
        except ChDropletError as exc:
            row = {"eps": eps, "error": f"{type(exc).__name__}: {exc}"}
        rows.append(row)
    good = [r for r in rows if not r["error"]]
    flags = {}
    if good:
        l3 = [r["lambda3_over_eps"] for r in good]
        m3 = [r["mu3_over_eps2"] for r in good]
        ordered = sorted(good, key=lambda r: -r["eps"])
        db = [r["dbar"] for r in ordered]
        flags = {
            "small_eigenvalues": all(r["pass_small"] for r in good),
            "lambda3_over_eps_spread": max(l3) / min(l3),
            "lambda3_scaling": max(l3) / min(l3) <= 1.4,
            "mu3_over_eps2_min": min(m3),
            "mu3_bounded_below": min(m3) > 0,
            "dbar_smallest_eps": db[-1],
            "dbar_small": db[-1] <= 1e-3,
            "dbar_decreasing": all(b < a for a, b in zip(db, db[1:])),
        }
    if out_dir is not None:
        write_rows(Path(out_dir) / "spectral_sweep.csv", rows)
    return {"rows": rows, "flags": flags}


def tail_slope(profile, start=4.0, stop=12.0):
    """Least-squares slope of log(alpha - U) on [rho + start, rho + stop]."""
    r = profile.r
    sel = (r >= profile.rho + start) & (r <= profile.rho + stop)
    gap = profile.alpha - profile.values[sel]
    slope, _ = np.polyfit(r[sel], np.log(gap), 1)
    return float(slope)


def run_profile_sweep(cfg: ExperimentConfig, out_dir=None):
    rows = []
    for rho in cfg.rho_list:
        try:
            p = solve_radial_profile(float(rho))
            slope = tail_slope(p)
            rows.append({"rho": rho, "sigma": p.sigma, "sigma_rho": p.sigma * rho, "alpha": p.alpha,
                         "residual": p.residual, "tail_slope": slope,
                         "tail_error": abs(slope / -np.sqrt(2.0) - 1.0), "monotone": p.is_monotone(),
                         "error": ""})
        except ChDropletError as exc:
            rows.append({"rho": rho, "error": f"{type(exc).__name__}: {exc}"})
    good = [r for r in rows if not r["error"]]
    fit = None
    if len(good) >= 2:
        rho = np.array([r["rho"] for r in good], dtype=float)
        y = np.array([r["sigma_rho"] for r in good])
        X = np.column_stack([np.ones_like(rho), 1.0 / rho])
        coef, *_ = np.linalg.lstsq(X, y, rcond=None)
        rel = float(np.linalg.norm(X @ coef - y) / np.linalg.norm(y))
        fit = {"c1": float(coef[0]), "c2": float(coef[1]), "relative_residual": rel}
    flags = {
        "residual_ok": all(r["residual"] < 1e-8 for r in good) and len(good) == len(rows),
        "fit_ok": fit is not None and fit["relative_residual"] < 1e-2,
        "tail_ok": all(r["tail_error"] < 0.05 for r in good),
    }
    if out_dir is not None:
        write_rows(Path(out_dir) / "profile_sweep.csv", rows)
    return {"rows": rows, "fit": fit, "flags": flags}


def norm_ratios(cfg: ExperimentConfig, eps, n=None):
    grid = Grid(n or cfg.n)
    fam = DropletFamily(grid, eps, rho_phys=cfg.rho_phys, xi0=tuple(cfg.xi0), delta=cfg.delta)
    st = fam.build(tuple(cfg.xi0))
    hm1 = lambda f: float(np.sqrt(grid.inner_hm1(f, f)))
    t_h = max(hm1(t) for t in st.tangents)
    t_l = max(grid.norm_l2(t) for t in st.tangents)
    s_l = max(grid.norm_l2(st.second[i][j]) for i in range(2) for j in range(2))
    s_h = max(hm1(st.second[i][j]) for i in range(2) for j in range(2))
    return {"eps": eps, "tangent_hm1": t_h, "tangent_l2_sqrt_eps": t_l * np.sqrt(eps),
            "second_l2_eps_1.5": s_l * eps**1.5, "second_hm1_sqrt_eps": s_h * np.sqrt(eps)}


NORM_KEYS = ("tangent_hm1", "tangent_l2_sqrt_eps", "second_l2_eps_1.5", "second_hm1_sqrt_eps")


def run_norm_scaling(cfg: ExperimentConfig, out_dir=None, tolerance=0.3):
    rows = [norm_ratios(cfg, eps) for eps in cfg.eps]
    spread = {k: max(r[k] for r in rows) / min(r[k] for r in rows) - 1.0 for k in NORM_KEYS}
    flags = {f"{k}_flat": spread[k] < tolerance for k in NORM_KEYS}
    if out_dir is not None:
        write_rows(Path(out_dir) / "norm_scaling.csv", rows)
    return {"rows": rows, "spread": spread, "flags": flags}


# -- persistence ----------------------------------------------------------------------

def write_rows(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = []
    for r in rows:
        for k in r:
            if k not in keys:
                keys.append(k)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir, command, cfg: ExperimentConfig, outputs, extra=None):
    """Manifest beside the outputs: config, code version, RNG keying and file hashes."""
    out = Path(out_dir)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": cfg.to_dict(),
        "code_version": __version__,
        "python": sys.version.split()[0],
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "platform": platform.platform(),
        "rng": {"generator": "Philox", "key": "seed + 2**64 * path", "counter": "[0, 0, 0, step]",
                "seed": cfg.seed, "paths": cfg.paths, "initial_data_step": INITIAL_DATA_STEP},
        "outputs": [{"file": Path(p).name, "sha256": _sha256(p)} for p in outputs],
    }
    if extra:
        manifest["extra"] = extra
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default))
    return path


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, PathRecord):
        return asdict(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default))
