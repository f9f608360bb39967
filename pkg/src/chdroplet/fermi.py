"""Fermi coordinates around the droplet manifold and the reduced SDE for the center.

A field u near the manifold is written u = u~(xi) + v with v orthogonal in
H^-1 to the two small-eigenvalue eigenfields psi_1, psi_2 at xi.  Along a
solution of  du = L(u) dt + dW  Ito's formula applied to these constraints
gives  d xi = f dt + <sigma, dW>  with

    A_kj   = <psi_k, u~_j> - <v, psi_k,j>
    sigma  = A^-1 psi
    Gamma  = <Q sigma_i, sigma_j>
    (A f)_k = <psi_k, L(u)>
            + sum_ij [1/2 <v, psi_k,ij> - <psi_k,j, u~_i> - 1/2 <psi_k, u~_ij>] Gamma_ij
            + sum_j <Q psi_k,j, sigma_j>

where subscripts after a comma denote xi-derivatives.  The eigenfield
derivatives come from central differences of eigen-decompositions at
neighbouring centers, with the eigenbasis gauge fixed by orthogonal
Procrustes matching to the base point.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from .droplet import DropletFamily, DropletState
from .errors import NewtonDiverged, NotInTube, Singular
from .linearization import (EigenStructure, LinearizedOperator, leading_eigenpairs,
                            nonlinear_cahn_hilliard, procrustes_align)

log = logging.getLogger(__name__)


# -- eigen frames -----------------------------------------------------------------

@dataclass
class EigenFrame:
    """psi_k and its xi-derivatives at a base center.

    ``dpsi[j][k]`` is d psi_k / d xi_j and ``d2psi[i][j][k]`` the second
    derivative; either may be None if not requested.
    """

    xi: tuple
    eig: EigenStructure
    psi: list
    dpsi: list | None = None
    d2psi: list | None = None
    h: float = 1e-3

    @property
    def order(self):
        return 0 if self.dpsi is None else (1 if self.d2psi is None else 2)


def _eig_at(family: DropletFamily, xi, count, v0=None):
    u = family.field(xi, check=False)
    op = LinearizedOperator(family.grid, u, family.eps)
    return leading_eigenpairs(op, count=count, v0=v0)


def compute_frame(family: DropletFamily, xi, order=2, h=1e-3, count=3):
    """Eigen frame at ``xi`` with ``order`` xi-derivatives by central differences."""
    grid = family.grid
    inner = grid.inner_hm1
    xi = (float(xi[0]), float(xi[1]))
    family.check_clearance(xi)
    es = _eig_at(family, xi, count)
    psi = list(es.psi)
    if order == 0:
        return EigenFrame(xi=xi, eig=es, psi=psi, h=h)

    def aligned(point):
        other = _eig_at(family, point, count)
        return procrustes_align(psi, list(other.psi), inner)

    plus, minus = [], []
    for j in range(2):
        e = np.zeros(2)
        e[j] = h
        plus.append(aligned(tuple(np.add(xi, e))))
        minus.append(aligned(tuple(np.subtract(xi, e))))
    dpsi = [[(plus[j][k] - minus[j][k]) / (2 * h) for k in range(2)] for j in range(2)]
    d2psi = None
    if order >= 2:
        d2psi = [[None, None], [None, None]]
        for j in range(2):
            d2psi[j][j] = [(plus[j][k] - 2 * psi[k] + minus[j][k]) / h**2 for k in range(2)]
        corners = {}
        for sx in (1, -1):
            for sy in (1, -1):
                corners[sx, sy] = aligned((xi[0] + sx * h, xi[1] + sy * h))
        mixed = [(corners[1, 1][k] - corners[1, -1][k] - corners[-1, 1][k] + corners[-1, -1][k])
                 / (4 * h * h) for k in range(2)]
        d2psi[0][1] = mixed
        d2psi[1][0] = mixed
    return EigenFrame(xi=xi, eig=es, psi=psi, dpsi=dpsi, d2psi=d2psi, h=h)


def _lowdin(fields, inner):
    G = np.array([[inner(a, b) for b in fields] for a in fields])
    w, V = np.linalg.eigh(G)
    S = V @ np.diag(w**-0.5) @ V.T
    return [sum(S[i, j] * fields[j] for j in range(len(fields))) for i in range(len(fields))]


def _frame_coefficients(frame: EigenFrame, grid):
    """Cosine coefficients of the frame fields, cached on the frame."""
    cached = getattr(frame, "_coeffs", None)
    if cached is None:
        fw = grid.forward
        psi = [fw(p) for p in frame.psi]
        dpsi = None if frame.dpsi is None else [[fw(f) for f in row] for row in frame.dpsi]
        d2psi = None if frame.d2psi is None else [[[fw(f) for f in col] for col in row]
                                                   for row in frame.d2psi]
        cached = (psi, dpsi, d2psi)
        frame._coeffs = cached
    return cached


def transport_coefficients(frame: EigenFrame, xi, grid):
    """Cosine coefficients of the transported, H^-1-orthonormalized psi_1, psi_2."""
    psi0, dpsi, d2psi = _frame_coefficients(frame, grid)
    d = np.subtract(xi, frame.xi)
    if dpsi is None or not np.any(d != 0):
        return psi0
    psi = []
    for k in range(2):
        c = psi0[k] + d[0] * dpsi[0][k] + d[1] * dpsi[1][k]
        if d2psi is not None:
            c = c + 0.5 * (d[0] * d[0] * d2psi[0][0][k] + 2 * d[0] * d[1] * d2psi[0][1][k]
                           + d[1] * d[1] * d2psi[1][1][k])
        psi.append(c)
    w = grid._mu_inv
    return _lowdin(psi, lambda a, b: float(np.sum(a * b * w)))


@dataclass
class LocalFrame:
    """Droplet state and eigen data evaluated at one center."""

    xi: tuple
    state: DropletState
    psi: list
    dpsi: list | None
    d2psi: list | None
    base: EigenFrame
    grid: object = None

    def inner(self, a, b):
        return self.grid.inner_hm1(a, b)


def transport(frame: EigenFrame, xi, grid):
    """Taylor-transport the frame's eigenfields (and their first derivatives) to ``xi``."""
    d = np.subtract(xi, frame.xi)
    psi = [grid.inverse(c) for c in transport_coefficients(frame, xi, grid)]
    dpsi = None
    if frame.dpsi is not None:
        dpsi = [[frame.dpsi[j][k].copy() for k in range(2)] for j in range(2)]
        if frame.d2psi is not None:
            for k in range(2):
                for j in range(2):
                    dpsi[j][k] = dpsi[j][k] + sum(d[i] * frame.d2psi[i][j][k] for i in range(2))
    return psi, dpsi


class FrameCache:
    """Eigen frames recomputed only when the center moves more than ``refresh * eps``."""

    def __init__(self, family: DropletFamily, order=2, h=1e-3, refresh=0.1):
        self.family = family
        self.order = order
        self.h = h
        self.refresh = refresh
        self.frames: list[EigenFrame] = []
        self.solves = 0

    def frame(self, xi):
        best, dist = None, np.inf
        for f in self.frames:
            d = float(np.hypot(xi[0] - f.xi[0], xi[1] - f.xi[1]))
            if d < dist:
                best, dist = f, d
        if best is None or dist > self.refresh * self.family.eps:
            best = compute_frame(self.family, xi, order=self.order, h=self.h)
            self.solves += 1
            self.frames.append(best)
        return best

    def local(self, xi, second=True, frame=None):
        xi = (float(xi[0]), float(xi[1]))
        frame = frame or self.frame(xi)
        state = self.family.build(xi, second=second)
        psi, dpsi = transport(frame, xi, self.family.grid)
        return LocalFrame(xi=xi, state=state, psi=psi, dpsi=dpsi, d2psi=frame.d2psi, base=frame,
                          grid=self.family.grid)


# -- projection ---------------------------------------------------------------------

@dataclass(frozen=True)
class FermiDecomposition:
    xi: tuple
    v: np.ndarray
    frame: LocalFrame
    norm_hm1: float
    norm_l2: float
    iterations: int
    trace: tuple = ()

    @property
    def state(self):
        return self.frame.state


def project_to_manifold(u, cache: FrameCache, xi_guess, tol=1e-12, max_iter=30,
                        tube_exponent=1.5, jac_step=None, second=True):
    """Newton solve of <u - u~(xi), psi_k(xi)>_{H^-1} = 0 for the center xi."""
    fam = cache.family
    grid = fam.grid
    inner = grid.inner_hm1
    eps = fam.eps
    hj = 1e-5 * eps if jac_step is None else jac_step
    xi = np.array(xi_guess, dtype=float)

    u_c = grid.forward(u)
    weight = grid._mu_inv

    def G(point, frame):
        psi = transport_coefficients(frame, point, grid)
        w = (u_c - grid.forward(fam.field(point, check=False))) * weight
        return np.array([float(np.sum(w * p)) for p in psi])

    trace = []
    frame = cache.frame(tuple(xi))
    g = G(xi, frame)
    it = 0
    converged = False
    while it < max_iter:
        it += 1
        J = np.empty((2, 2))
        for j in range(2):
            e = np.zeros(2)
            e[j] = hj
            J[:, j] = (G(xi + e, frame) - G(xi - e, frame)) / (2 * hj)
        try:
            step = -np.linalg.solve(J, g)
        except np.linalg.LinAlgError as exc:
            raise NewtonDiverged("singular Fermi Jacobian", trace) from exc
        gnorm = float(np.linalg.norm(g))
        lam = 1.0
        for _ in range(6):
            trial = xi + lam * step
            g_trial = G(trial, frame)
            if np.linalg.norm(g_trial) < gnorm or gnorm == 0.0:
                break
            lam *= 0.5
        else:
            # no decrease: accept only if already at roundoff level
            if np.linalg.norm(step) < tol:
                converged = True
                break
            raise NewtonDiverged("Fermi Newton failed to reduce the residual", trace)
        xi, g = trial, g_trial
        trace.append((float(np.linalg.norm(step)), float(np.linalg.norm(g))))
        if not np.all(np.isfinite(xi)):
            raise NewtonDiverged("non-finite Fermi iterate", trace)
        new_frame = cache.frame(tuple(xi))
        if new_frame is not frame:
            frame = new_frame
            g = G(xi, frame)
            continue
        if lam * np.linalg.norm(step) < tol:
            converged = True
            break
    if not converged:
        raise NewtonDiverged(f"no convergence in {max_iter} Fermi iterations", trace)
    fam.check_clearance(xi)
    local = cache.local(tuple(xi), second=second, frame=frame)
    v = u - local.state.field
    drift = grid.mean(v)
    if abs(drift) > 1e-10:
        raise NotInTube(f"mass of u differs from the manifold mass by {drift:.3e}")
    v = v - drift
    nh = float(np.sqrt(max(inner(v, v), 0.0)))
    if nh >= eps**tube_exponent:
        raise NotInTube(f"||v||_H-1 = {nh:.3e} exceeds eps^{tube_exponent} = {eps**tube_exponent:.3e}")
    return FermiDecomposition(xi=tuple(float(c) for c in xi), v=v, frame=local, norm_hm1=nh,
                              norm_l2=grid.norm_l2(v), iterations=it, trace=tuple(trace))


# -- reduced coefficients -----------------------------------------------------------------

@dataclass
class ReducedCoefficients:
    A: np.ndarray
    A_inv: np.ndarray
    Z0: np.ndarray
    Z1: np.ndarray
    sigma: list
    f: np.ndarray | None = None
    mode: str = "full"
    terms: dict = field(default_factory=dict)


def _split(obj):
    if isinstance(obj, FermiDecomposition):
        return obj.frame, obj.v
    return obj, None


def assemble_A(fd, v=None, det_tol=1e-12):
    """A_kj = <psi_k, u~_j> - <v, psi_k,j> as (A, A^-1, Z0, Z1)."""
    frame, v_fd = _split(fd)
    if v is None:
        v = v_fd
    tang = frame.state.tangents
    Z0 = np.array([[frame.inner(frame.psi[k], tang[j]) for j in range(2)] for k in range(2)])
    Z1 = np.zeros((2, 2))
    if v is not None:
        if frame.dpsi is None:
            raise ValueError("eigenfield derivatives are needed when v is supplied")
        Z1 = -np.array([[frame.inner(v, frame.dpsi[j][k]) for j in range(2)] for k in range(2)])
    A = Z0 + Z1
    det = float(np.linalg.det(A))
    if abs(det) < det_tol:
        raise Singular(f"det A = {det:.3e}")
    return A, np.linalg.inv(A), Z0, Z1


def diffusion_fields(fd, v=None, A_inv=None):
    """sigma_r = sum_i (A^-1)_ri psi_i."""
    frame, _ = _split(fd)
    if A_inv is None:
        A_inv = assemble_A(fd, v)[1]
    return [A_inv[r, 0] * frame.psi[0] + A_inv[r, 1] * frame.psi[1] for r in range(2)]


def drift_vector(fd, noise, mode="full", v=None, eps=None):
    """Ito drift f of the center; ``mode='leading'`` keeps only A^-1 <psi, L(u)>.

    Returns a ReducedCoefficients record carrying A, sigma and the separate
    drift contributions in ``terms``.
    """
    if mode not in ("full", "leading"):
        raise ValueError(f"unknown drift mode {mode!r}")
    frame, v_fd = _split(fd)
    if v is None:
        v = v_fd
    grid = frame.grid
    inner = frame.inner
    state = frame.state
    eps = state.eps if eps is None else eps
    A, A_inv, Z0, Z1 = assemble_A(frame, v)
    sigma = diffusion_fields(frame, A_inv=A_inv)
    u = state.field if v is None else state.field + v
    Lu = nonlinear_cahn_hilliard(grid, u, eps)
    b_lead = np.array([inner(frame.psi[k], Lu) for k in range(2)])
    terms = {"leading": A_inv @ b_lead}
    b = b_lead.copy()
    if mode == "full" and noise is not None and noise.eta0 > 0:
        if frame.dpsi is None or frame.d2psi is None or state.second is None:
            raise ValueError("full drift needs first and second xi-derivatives")
        Gam = np.array([[noise.q_inner(sigma[i], sigma[j]) for j in range(2)] for i in range(2)])
        ito = np.zeros(2)
        cross = np.zeros(2)
        for k in range(2):
            for i in range(2):
                for j in range(2):
                    c = -inner(frame.dpsi[j][k], state.tangents[i]) \
                        - 0.5 * inner(frame.psi[k], state.second[i][j])
                    if v is not None:
                        c += 0.5 * inner(v, frame.d2psi[i][j][k])
                    ito[k] += c * Gam[i, j]
            cross[k] = sum(noise.q_inner(frame.dpsi[j][k], sigma[j]) for j in range(2))
        b = b + ito + cross
        terms.update(ito=A_inv @ ito, cross=A_inv @ cross, gamma=Gam)
    f = A_inv @ b
    return ReducedCoefficients(A=A, A_inv=A_inv, Z0=Z0, Z1=Z1, sigma=sigma, f=f, mode=mode, terms=terms)


def reduced_sde_step(xi, coeffs: ReducedCoefficients, dt, dW, grid, family=None):
    """Euler-Maruyama step xi + f dt + (<sigma_1, dW>, <sigma_2, dW>)."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    inc = np.zeros(2)
    if dW is not None:
        inc = np.array([grid.inner_hm1(s, dW) for s in coeffs.sigma])
    new = np.asarray(xi, dtype=float) + coeffs.f * dt + inc
    if family is not None:
        family.check_clearance(new)
    return new


def stratonovich_diagnostic(fd, noise, v=None):
    """Compare the Ito drift with the Stratonovich drift A^-1 <psi, L(u)>.

    The difference is the Ito-to-Stratonovich conversion carried by the
    curvature and noise-covariance terms.
    """
    rc = drift_vector(fd, noise, mode="full", v=v)
    strat = rc.terms["leading"]
    return {"ito": rc.f, "stratonovich": strat, "conversion": rc.f - strat}


class TraceWriter:
    """Step-level CSV trace: t, xi, ||v||, f and Newton iteration counts."""

    header = ["t", "xi_x", "xi_y", "v_hm1", "v_l2", "f_x", "f_y", "iterations"]

    def __init__(self, path):
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(self.header)

    def write(self, t, xi, v_hm1, v_l2, f=(np.nan, np.nan), iterations=0):
        self._w.writerow([repr(float(t)), repr(float(xi[0])), repr(float(xi[1])), repr(float(v_hm1)),
                          repr(float(v_l2)), repr(float(f[0])), repr(float(f[1])), int(iterations)])

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
