"""Radial droplet profiles and the two-parameter family of droplet states.

The whole-plane radial problem  U'' + U'/r = F'(U) + sigma  is solved in the
stretched variable r = |x| / eps.  A profile is parametrized by the radius
``rho`` of its zero level set, U(rho) = 0.  For fixed sigma the droplet
(critical nucleus) is found by Newton iteration on a fourth-order
finite-difference discretization; sigma is then adjusted by bracketed
root finding until the zero crossing sits at ``rho``.

A droplet state on the unit square is

    u(x) = U(|x - xi| / eps, (rho_phys - a) / eps),

with the shift ``a`` fixed by mass conservation.  Since ``a`` is
exponentially small the radius dependence enters through the first-order
rho-sensitivity of the profile, which is obtained exactly from the
linearized radial system.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import optimize, sparse
from scipy.interpolate import CubicSpline
from scipy.sparse.linalg import splu

from .errors import NoBracket, NoConvergence, OutOfDomain, RootFindFailure
from .spectral import Grid, dF, d2F

log = logging.getLogger(__name__)

SQRT2 = np.sqrt(2.0)
# Leading-order chemical potential: sigma ~ GT_CONSTANT / rho, from the
# surface tension 2 sqrt(2)/3 of the quartic kink over the jump of 2.
GT_CONSTANT = SQRT2 / 3.0


def kink(s):
    """Heteroclinic kink tanh(s / sqrt 2) solving U'' = F'(U), U(0) = 0."""
    return np.tanh(np.asarray(s) / SQRT2)


def kink_second_derivative(s):
    t = kink(s)
    return -t * (1.0 - t * t)


def far_field_value(sigma):
    """Root of F'(alpha) + sigma = 0 closest to 1."""
    roots = np.roots([1.0, 0.0, -1.0, sigma])
    real = roots[np.abs(roots.imag) < 1e-9].real
    return float(real[np.argmin(np.abs(real - 1.0))])


def radial_laplacian_matrix(n, h):
    """Fourth-order radial Laplacian on r_i = i h, i = 0..n, even reflections at both ends."""
    r = np.arange(n + 1) * h
    c2 = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / (12.0 * h * h)
    c1 = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / (12.0 * h)
    rows, cols, vals = [], [], []
    for i in range(n + 1):
        if i == 0:
            w = 2.0 * c2
        else:
            w = c2 + c1 / r[i]
        for off, wv in zip(range(-2, 3), w):
            j = i + off
            if j < 0:
                j = -j
            elif j > n:
                j = 2 * n - j
            rows.append(i)
            cols.append(j)
            vals.append(wv)
    return sparse.csc_matrix((vals, (rows, cols)), shape=(n + 1, n + 1)), r


@dataclass(frozen=True, eq=False)
class RadialProfile:
    """Stationary radial droplet in stretched variables.

    ``values`` holds U*(r_i), ``drho`` the sensitivity dU*/drho on the same
    nodes.
    """

    rho: float
    r: np.ndarray
    values: np.ndarray
    drho: np.ndarray
    sigma: float
    dsigma: float
    alpha: float
    residual: float
    iterations: int = 0

    def __post_init__(self):
        # clamped at r = 0 (radial symmetry) and at r_max (Neumann)
        bc = ((1, 0.0), (1, 0.0))
        object.__setattr__(self, "_splines", (CubicSpline(self.r, self.values, bc_type=bc),
                                              CubicSpline(self.r, self.drho, bc_type=bc)))

    @property
    def r_max(self):
        return float(self.r[-1])

    @property
    def nu(self):
        """Tail decay rate sqrt(F''(alpha))."""
        return float(np.sqrt(d2F(self.alpha)))

    @property
    def derivative(self):
        return self._spline(0)(self.r, 1)

    def _spline(self, which):
        return self._splines[which]

    def __call__(self, s, nu=0):
        """U*(s) and its s-derivatives; constant far field beyond r_max."""
        s = np.asarray(s, dtype=float)
        out = self._spline(0)(np.minimum(s, self.r_max), nu)
        if nu == 0:
            return np.where(s > self.r_max, self.alpha, out)
        return np.where(s > self.r_max, 0.0, out)

    def d_rho(self, s, nu=0):
        """dU*/drho and its s-derivatives."""
        s = np.asarray(s, dtype=float)
        out = self._spline(1)(np.minimum(s, self.r_max), nu)
        if nu == 0:
            far = self.drho[-1]
            return np.where(s > self.r_max, far, out)
        return np.where(s > self.r_max, 0.0, out)

    def is_monotone(self):
        return bool(np.all(np.diff(self.values) >= -1e-14))

    def to_csv(self, path):
        table = np.column_stack([self.r, self.values, self.derivative])
        np.savetxt(path, table, delimiter=",", header="r,U,dU", comments="", fmt="%.17g")

    def sidecar(self):
        return {
            "rho": self.rho,
            "sigma": self.sigma,
            "alpha": self.alpha,
            "nu": self.nu,
            "residual": self.residual,
            "r_max": self.r_max,
            "n_r": int(self.r.size),
        }

    def save(self, stem):
        """Write ``<stem>.csv`` and the JSON sidecar ``<stem>.json``."""
        self.to_csv(f"{stem}.csv")
        with open(f"{stem}.json", "w") as fh:
            json.dump(self.sidecar(), fh, indent=2)


class _RadialSolver:
    def __init__(self, r_max, h):
        n = int(np.ceil(r_max / h))
        self.h = r_max / n
        self.D, self.r = radial_laplacian_matrix(n, self.h)

    def residual(self, U, sigma):
        return self.D @ U - dF(U) - sigma

    def newton(self, U, sigma, tol, maxit=40):
        trace = []
        for it in range(maxit):
            R = self.residual(U, sigma)
            res = float(np.max(np.abs(R)))
            trace.append(res)
            if res < tol:
                return U, res, it
            J = self.D - sparse.diags(d2F(U))
            dU = splu(J.tocsc()).solve(-R)
            # crude damping against overshoot far from the nucleus
            step = np.max(np.abs(dU))
            if step > 0.5:
                dU *= 0.5 / step
            U = U + dU
            if not np.all(np.isfinite(U)):
                break
            if step < 1e-12:
                # residual has reached the roundoff floor of the 1/h^2 stencil
                res = float(np.max(np.abs(self.residual(U, sigma))))
                if res < max(tol, 1e-9):
                    return U, res, it + 1
        raise NoConvergence(f"radial Newton failed at sigma={sigma:.6g}", trace)

    def zero_crossing(self, U):
        idx = np.nonzero((U[:-1] < 0) & (U[1:] >= 0))[0]
        if idx.size != 1:
            return None
        i = int(idx[0])
        lo, hi = max(i - 3, 0), min(i + 5, U.size)
        sp = CubicSpline(self.r[lo:hi], U[lo:hi])
        return float(optimize.brentq(sp, self.r[i], self.r[i + 1], xtol=1e-15))

    def shifted_guess(self, U, R_old, R_new):
        """Translate a profile so that its zero crossing moves to R_new."""
        sp = CubicSpline(self.r, U, bc_type=((1, 0.0), (1, 0.0)))
        s = self.r - (R_new - R_old)
        return np.where(s < 0, U[0], np.where(s > self.r[-1], U[-1], sp(np.clip(s, 0, self.r[-1]))))


def solve_radial_profile(rho, r_max=None, tol=1e-10, h=0.01, rho_min=2.0):
    """Droplet profile with zero level at ``rho`` (stretched units).

    Raises NoBracket when no droplet with that radius could be bracketed in
    sigma, NoConvergence when a Newton solve fails.
    """
    if rho < rho_min:
        raise NoBracket(f"rho={rho} below the configured minimum {rho_min}")
    if r_max is None:
        r_max = rho + 40.0
    if r_max < rho + 20.0:
        raise ValueError("r_max must leave room for the exponential tail")
    solver = _RadialSolver(r_max, h)
    r = solver.r

    cache: dict[float, tuple[np.ndarray, float]] = {}
    best = {"U": None, "R": None}

    def nucleus(sigma):
        if sigma in cache:
            return cache[sigma]
        alpha = far_field_value(sigma)
        if best["U"] is None:
            R0 = GT_CONSTANT / sigma
            U0 = alpha * np.tanh((r - R0) / SQRT2)
            U0 = np.maximum(U0, -1.0)
        else:
            R0 = best["R"] * best["sigma"] / sigma
            U0 = solver.shifted_guess(best["U"], best["R"], R0)
        if R0 > r_max - 15.0 or R0 < 0.5:
            raise NoBracket(f"nucleus radius estimate {R0:.3g} outside the radial grid")
        U, _, _ = solver.newton(U0, sigma, tol=min(tol, 1e-11))
        R = solver.zero_crossing(U)
        if R is None or not np.all(np.diff(U) >= -1e-12):
            raise NoBracket(f"no single monotone droplet at sigma={sigma:.6g}")
        cache[sigma] = (U, R)
        best.update(U=U, R=R, sigma=sigma)
        return U, R

    def g(sigma):
        return nucleus(sigma)[1] - rho

    s0 = GT_CONSTANT / rho
    factor = 1.15
    try:
        lo = hi = s0
        glo = ghi = g(s0)
        for _ in range(60):
            if glo > 0 > ghi:
                break
            if ghi > 0:
                lo, glo = hi, ghi
                hi *= factor
                ghi = g(hi)
            else:
                hi, ghi = lo, glo
                lo /= factor
                glo = g(lo)
        else:
            raise NoBracket(f"could not bracket sigma for rho={rho}")
        sigma, info = optimize.brentq(g, lo, hi, xtol=1e-15, rtol=1e-15, full_output=True)
    except NoConvergence as exc:
        raise NoBracket(f"no droplet of radius {rho}: {exc}") from exc

    U, R = nucleus(sigma)
    # polish sigma-consistency at the final value
    U, res, it = solver.newton(U, sigma, tol=min(tol, 1e-11))
    alpha = far_field_value(sigma)
    # rho-sensitivity: J w = 1, U_rho = dsigma * w with U_r(rho) + U_rho(rho) = 0
    J = (solver.D - sparse.diags(d2F(U))).tocsc()
    w = splu(J).solve(np.ones_like(U))
    spU = CubicSpline(r, U, bc_type=((1, 0.0), (1, 0.0)))
    spw = CubicSpline(r, w)
    dsigma = -float(spU(rho, 1)) / float(spw(rho))
    drho = dsigma * w
    residual = float(np.max(np.abs(solver.residual(U, sigma))))
    if residual > tol:
        raise NoConvergence(f"profile residual {residual:.2e} above tol {tol:.1e}")
    log.debug("rho=%g sigma=%.12g alpha=%.12g residual=%.2e", rho, sigma, alpha, residual)
    return RadialProfile(
        rho=float(rho), r=r, values=U, drho=drho, sigma=float(sigma), dsigma=dsigma,
        alpha=alpha, residual=residual, iterations=info.iterations,
    )


@lru_cache(maxsize=64)
def cached_profile(rho, r_max=None, tol=1e-10, h=0.01):
    return solve_radial_profile(rho, r_max=r_max, tol=tol, h=h)


def minimal_radius(candidates=(4.0, 3.0, 2.5, 2.0, 1.5, 1.25, 1.0, 0.75, 0.5)):
    """Smallest radius in ``candidates`` (descending) for which sigma can be bracketed."""
    found = None
    for rho in candidates:
        try:
            solve_radial_profile(rho, rho_min=0.0)
        except (NoBracket, NoConvergence):
            break
        found = rho
    log.info("empirical minimal droplet radius: %s", found)
    return found


# -- droplet states on the unit square ------------------------------------

@dataclass(frozen=True)
class DropletState:
    """A point on the droplet manifold together with its xi-derivatives."""

    xi: tuple
    rho_phys: float
    eps: float
    a: float
    field: np.ndarray
    tangents: tuple
    second: tuple = field(default=None)
    da: tuple = (0.0, 0.0)

    @property
    def clearance(self):
        x, y = self.xi
        return min(x, 1 - x, y, 1 - y) - self.rho_phys


class DropletFamily:
    """Mass-conserving translations of a single droplet of radius ``rho_phys``.

    ``include_a_term`` toggles the mass-correction contribution to the
    tangent fields.
    """

    def __init__(self, grid: Grid, eps, rho_phys=0.2, xi0=(0.5, 0.5), delta=0.1,
                 mass_target=None, include_a_term=True, profile=None, rho_min=2.0):
        self.grid = grid
        self.eps = float(eps)
        self.rho_phys = float(rho_phys)
        self.xi0 = tuple(float(c) for c in xi0)
        self.delta = float(delta)
        self.include_a_term = include_a_term
        rho = self.rho_phys / self.eps
        if rho < rho_min:
            raise OutOfDomain(f"rescaled radius {rho:.3g} below minimum {rho_min}")
        if profile is None:
            X, Y = grid.coords
            reach = np.sqrt(2.0) / self.eps + 1.0
            profile = cached_profile(round(rho, 12), r_max=max(rho + 40.0, reach))
        self.profile = profile
        self.mass_target = (self.mass_at(self.xi0, 0.0) if mass_target is None
                            else float(mass_target))

    def check_clearance(self, xi):
        x, y = xi
        d = min(x, 1.0 - x, y, 1.0 - y)
        if d <= self.rho_phys + self.delta:
            raise OutOfDomain(f"center {tuple(xi)} has clearance {d:.4f} <= rho + delta "
                              f"= {self.rho_phys + self.delta:.4f}")

    def _geometry(self, xi):
        X, Y = self.grid.coords
        dx = X - xi[0]
        dy = Y - xi[1]
        r = np.hypot(dx, dy)
        return dx, dy, r

    def _raw(self, xi, a):
        _, _, r = self._geometry(xi)
        s = r / self.eps
        return self.profile(s) - (a / self.eps) * self.profile.d_rho(s)

    def mass_at(self, xi, a):
        return self.grid.integrate(self._raw(xi, a))

    def _shift_from(self, xi, U, W):
        if np.allclose(xi, self.xi0, rtol=0, atol=0):
            return 0.0
        m0 = self.grid.integrate(U)
        m1 = self.grid.integrate(W) / self.eps
        bound = 0.25 * self.rho_phys
        if m1 == 0.0 or not np.isfinite(m1):
            raise RootFindFailure("mass is insensitive to the radius shift")
        a = (m0 - self.mass_target) / m1
        if abs(a) > bound:
            raise RootFindFailure(f"mass shift {a:.3g} outside [-{bound}, {bound}]")
        return float(a)

    def _profiles(self, xi):
        _, _, r = self._geometry(xi)
        s = r / self.eps
        return self.profile(s), self.profile.d_rho(s)

    def solve_shift(self, xi):
        """Mass-correction shift a(xi); zero at the reference center.

        The corrected field is affine in ``a``, so the mass equation is solved
        in closed form.
        """
        return self._shift_from(xi, *self._profiles(xi))

    def field(self, xi, check=True):
        if check:
            self.check_clearance(xi)
        U, W = self._profiles(xi)
        a = self._shift_from(xi, U, W)
        return U - (a / self.eps) * W

    def build(self, xi, second=True, check=True):
        """Droplet state at ``xi`` with tangents and (optionally) second derivatives."""
        xi = (float(xi[0]), float(xi[1]))
        if check:
            self.check_clearance(xi)
        a = self.solve_shift(xi)
        eps = self.eps
        P = self.profile
        dx, dy, r = self._geometry(xi)
        s = r / eps
        u = P(s) - (a / eps) * P.d_rho(s)
        Ur = P(s, 1) - (a / eps) * P.d_rho(s, 1)
        Urr = P(s, 2) - (a / eps) * P.d_rho(s, 2)
        safe = np.where(r > 0, r, 1.0)
        n = (np.where(r > 0, dx / safe, 0.0), np.where(r > 0, dy / safe, 0.0))
        # spatial gradient of u
        grad = (Ur * n[0] / eps, Ur * n[1] / eps)
        # G_a = du/da, and its spatial gradient
        Ga = -P.d_rho(s) / eps
        Ga_r = -P.d_rho(s, 1) / eps**2
        Ga_grad = (Ga_r * n[0], Ga_r * n[1])
        sum_Ga = float(np.sum(Ga))
        if self.include_a_term:
            da = tuple(float(np.sum(g)) / sum_Ga for g in grad)
        else:
            da = (0.0, 0.0)
        tangents = tuple(-g + Ga * d for g, d in zip(grad, da))

        sec = None
        if second:
            Ur_over_s = np.where(s > 1e-8, Ur / np.where(s > 1e-8, s, 1.0), Urr)
            sec_list = [[None, None], [None, None]]
            for i in range(2):
                for j in range(i, 2):
                    delta = 1.0 if i == j else 0.0
                    hess = (Urr * n[i] * n[j] + Ur_over_s * (delta - n[i] * n[j])) / eps**2
                    t = hess - Ga_grad[i] * da[j] - Ga_grad[j] * da[i]
                    if self.include_a_term:
                        aij = -float(np.sum(t)) / sum_Ga
                        t = t + Ga * aij
                    sec_list[i][j] = t
                    sec_list[j][i] = t
            sec = tuple(tuple(row) for row in sec_list)
        return DropletState(xi=xi, rho_phys=self.rho_phys, eps=eps, a=a, field=u,
                            tangents=tangents, second=sec, da=da)


def build_droplet(grid, xi, rho_phys, eps, mass_target=None, xi0=(0.5, 0.5), delta=0.1):
    """Convenience wrapper: one droplet state from a freshly built family."""
    fam = DropletFamily(grid, eps, rho_phys=rho_phys, xi0=xi0, delta=delta, mass_target=mass_target)
    return fam.build(xi)


def droplet_tangents(state):
    return state.tangents, state.second
