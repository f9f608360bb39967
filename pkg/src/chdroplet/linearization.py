"""Linearized Cahn-Hilliard and mass-conserving Allen-Cahn operators at a droplet.

Sign convention: the Cahn-Hilliard linearization is

    L v = Laplacian(-eps^2 Laplacian v + F''(u) v),

a negative semi-definite operator on zero-mean H^{-1}, with eigenpairs
written as  L psi = -lam psi  so that stable directions carry lam > 0.
The Allen-Cahn operator is  A v = P(eps^2 Laplacian v - F''(u) v)  on zero-mean
L2 with  A phi = -mu phi.  Both share the quadratic form
<L v, v>_{H^-1} = <A v, v>_{L2}.

Eigenpairs are computed matrix-free.  The Cahn-Hilliard problem is conjugated
into L2 by K^{1/2}, K = -Laplacian, giving the symmetric operator

    S = K^{1/2} (eps^2 K + F''(u)) K^{1/2}

whose L2 eigenpairs (lam, phi) give H^{-1} eigenpairs (lam, K^{1/2} phi).
The smallest eigenvalues come from implicitly restarted Lanczos (ARPACK) in
shift-invert mode, the inner solves being preconditioned conjugate
gradients.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg, eigsh

from .errors import IllConditioned, NoConvergence
from .spectral import Grid, d2F, dF


class LinearizedOperator:
    """Linearization about ``base`` (a field) on ``grid`` for interface width ``eps``."""

    def __init__(self, grid: Grid, base, eps, kind="cahn_hilliard"):
        if kind not in ("cahn_hilliard", "allen_cahn"):
            raise ValueError(f"unknown operator kind {kind!r}")
        self.grid = grid
        self.base = np.asarray(base)
        self.eps = float(eps)
        self.kind = kind
        self.potential = d2F(self.base)
        mask = np.ones(grid.shape, dtype=bool)
        mask[0, 0] = False
        self._mask = mask
        self.size = int(mask.sum())

    # -- field-level actions --------------------------------------------
    def apply_cahn_hilliard(self, v):
        g = self.grid
        g.check_zero_mean(v)
        c = g.forward(v)
        w = g.forward(self.potential * v)
        return g.inverse(-g.mu * (self.eps**2 * g.mu * c + w))

    def apply_allen_cahn(self, v):
        g = self.grid
        g.check_zero_mean(v)
        out = self.eps**2 * g.laplacian(v) - self.potential * v
        return out - g.mean(out)

    def apply(self, v):
        if self.kind == "cahn_hilliard":
            return self.apply_cahn_hilliard(v)
        return self.apply_allen_cahn(v)

    def inner(self, a, b):
        if self.kind == "cahn_hilliard":
            return self.grid.inner_hm1(a, b)
        return self.grid.inner_l2(a, b)

    def quadratic_form(self, v):
        return self.inner(self.apply(v), v)

    # -- symmetric coefficient-space operator ----------------------------
    def _to_field(self, x):
        c = np.zeros(self.grid.shape)
        c[self._mask] = x
        return c

    def symmetric_matvec(self, x):
        """S x (Cahn-Hilliard) or -A x (Allen-Cahn) on zero-mean coefficients."""
        g = self.grid
        c = self._to_field(np.asarray(x, dtype=float).ravel())
        e2 = self.eps**2
        if self.kind == "cahn_hilliard":
            sq = g._sqrt_mu
            w = g.forward(self.potential * g.inverse(sq * c))
            out = sq * (e2 * g.mu * sq * c + w)
        else:
            w = g.forward(self.potential * g.inverse(c))
            out = e2 * g.mu * c + w
        return out[self._mask]

    def reference_symbol(self, shift=0.0):
        """Diagonal of the constant-coefficient operator with F'' = 2."""
        mu = self.grid.mu[self._mask]
        e2 = self.eps**2
        if self.kind == "cahn_hilliard":
            return mu * (e2 * mu + 2.0) - shift
        return e2 * mu + 2.0 - shift

    def coefficients_to_field(self, x):
        """Map an eigenvector of the symmetric problem to a physical field."""
        g = self.grid
        c = self._to_field(x)
        if self.kind == "cahn_hilliard":
            c = g._sqrt_mu * c
        return g.inverse(c)

    def field_to_coefficients(self, f):
        g = self.grid
        c = g.forward(f)
        if self.kind == "cahn_hilliard":
            c = c * g._inv_sqrt_mu
        return c[self._mask]


def apply_allen_cahn(op, v):
    return op.apply_allen_cahn(v)


def apply_cahn_hilliard(op, v):
    return op.apply_cahn_hilliard(v)


def nonlinear_cahn_hilliard(grid, u, eps):
    """Full operator Laplacian(-eps^2 Laplacian u + F'(u)) = -Laplacian(eps^2 Laplacian u - F'(u))."""
    c = grid.forward(u)
    w = grid.forward(dF(u))
    return grid.inverse(-grid.mu * (eps**2 * grid.mu * c + w))


@dataclass
class EigenStructure:
    """Leading eigenpairs of one linearized operator.

    ``eigenvalues`` are ascending; ``fields`` are orthonormal in the operator's
    inner product (H^-1 for Cahn-Hilliard, L2 for Allen-Cahn).
    """

    kind: str
    eigenvalues: np.ndarray
    fields: list
    residuals: np.ndarray
    shift: float
    iterations: dict = field(default_factory=dict)

    @property
    def psi(self):
        return self.fields[:2]

    def to_json(self):
        return {
            "kind": self.kind,
            "eigenvalues": [float(x) for x in self.eigenvalues],
            "residuals": [float(x) for x in self.residuals],
            "shift": self.shift,
            "iterations": self.iterations,
        }


def _default_shift(op):
    # safely below the two small eigenvalues and far under the gap, which
    # scales like eps (Cahn-Hilliard) or eps^2 (Allen-Cahn)
    return -2.0 * op.eps if op.kind == "cahn_hilliard" else -op.eps**2


def leading_eigenpairs(op: LinearizedOperator, count=3, tol=1e-12, shift=None,
                       v0=None, cg_tol=1e-13, maxiter=None):
    """Smallest ``count`` eigenpairs via shift-invert Lanczos with inner PCG.

    Raises NoConvergence if any residual exceeds ``tol`` times the spectral
    radius of the discrete operator (roundoff in a single application is of
    that size).
    """
    if count < 3:
        raise ValueError("count must be at least 3")
    s = _default_shift(op) if shift is None else float(shift)
    n = op.size
    A = LinearOperator((n, n), matvec=op.symmetric_matvec, dtype=float)
    precond = 1.0 / op.reference_symbol(s)
    M = LinearOperator((n, n), matvec=lambda x: precond * x, dtype=float)
    shifted = LinearOperator((n, n), matvec=lambda x: op.symmetric_matvec(x) - s * x, dtype=float)
    stats = {"outer": 0, "inner": 0}

    def count_inner(_):
        stats["inner"] += 1

    def solve(b):
        stats["outer"] += 1
        x, info = cg(shifted, b, rtol=cg_tol, atol=0.0, M=M, maxiter=5000, callback=count_inner)
        if info != 0:
            raise NoConvergence(f"inner CG did not converge (info={info})")
        return x

    OPinv = LinearOperator((n, n), matvec=solve, dtype=float)
    if v0 is None:
        # fixed start vector: ARPACK's internal random start is process-stateful
        v0 = np.random.default_rng(20240611).standard_normal(n)
    v0 = np.asarray(v0, dtype=float)
    vals, vecs = eigsh(A, k=count, sigma=s, which="LM", OPinv=OPinv, v0=v0,
                       tol=1e-13, maxiter=maxiter, ncv=max(2 * count + 1, 12))
    order = np.argsort(vals)
    vals = vals[order]
    vecs = vecs[:, order]
    fields = []
    residuals = []
    scale = float(np.max(op.reference_symbol()))
    for lam, x in zip(vals, vecs.T):
        x = x / np.linalg.norm(x)
        r = op.symmetric_matvec(x) - lam * x
        # ||L psi + lam psi||_{H^-1} = ||S x - lam x||_{L2}
        residuals.append(float(np.linalg.norm(r)))
        fields.append(op.coefficients_to_field(x))
    residuals = np.asarray(residuals)
    if np.max(residuals) > tol * scale:
        raise NoConvergence(f"eigen-residuals {residuals} exceed tol {tol}", list(residuals))
    return EigenStructure(kind=op.kind, eigenvalues=vals, fields=fields,
                          residuals=residuals, shift=s, iterations=dict(stats))


# -- subspace geometry -------------------------------------------------------

def _gram(inner, fields):
    m = len(fields)
    G = np.empty((m, m))
    for i in range(m):
        for j in range(i, m):
            G[i, j] = G[j, i] = inner(fields[i], fields[j])
    return G


def subspace_distance(inner, E, F):
    """One-sided distance sup_{phi in span E, |phi| = 1} dist(phi, span F).

    ``F`` must be orthonormal in ``inner``; ``E`` is any independent family.
    """
    G = _gram(inner, E)
    L = np.linalg.cholesky(G)
    Linv = np.linalg.inv(L)
    # orthonormal basis of span E
    Q = [sum(Linv[i, j] * E[j] for j in range(len(E))) for i in range(len(E))]
    R = []
    for q in Q:
        r = q - sum(inner(q, f) * f for f in F)
        R.append(r)
    RG = _gram(inner, R)
    top = float(np.max(np.linalg.eigvalsh(RG)))
    return float(np.clip(np.sqrt(max(top, 0.0)), 0.0, 1.0))


def tangent_alignment(es: EigenStructure, tangents, grid: Grid):
    """Distance in H^-1 between the tangent plane and span(psi_1, psi_2)."""
    return subspace_distance(grid.inner_hm1, list(tangents), es.psi)


@dataclass
class CoefficientMatrices:
    a: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    B_bar: np.ndarray
    psi_bar: list
    gram: np.ndarray


def givens_rotation(B):
    """Rotation Q with (B Q^T)[0, 1] = 0 and (B Q^T)[0, 0] >= 0."""
    b0 = B[0]
    nrm = np.hypot(b0[0], b0[1])
    if nrm == 0:
        return np.eye(2)
    c, s = b0[0] / nrm, b0[1] / nrm
    return np.array([[c, s], [-s, c]])


def coefficient_matrices(es: EigenStructure, tangents, grid: Grid, max_condition=1e6):
    """Expansion of psi_i in normalized tangents and the barred eigenbasis.

    ``B[j, k] = <u_j, psi_k>``.  The rotated basis psi_bar = Q psi satisfies
    <u_1, psi_bar_2> = 0, i.e. B_bar = B Q^T is lower triangular.
    """
    inner = grid.inner_hm1
    psi = es.psi
    norms = [np.sqrt(inner(t, t)) for t in tangents]
    unit = [t / n for t, n in zip(tangents, norms)]
    G = _gram(inner, unit)
    if np.linalg.cond(G) > max_condition:
        raise IllConditioned(f"tangent Gram matrix condition {np.linalg.cond(G):.3g}")
    rhs = np.array([[inner(p, t) for t in unit] for p in psi])
    a = np.linalg.solve(G, rhs.T).T
    B = np.array([[inner(t, p) for p in psi] for t in tangents])
    Q = givens_rotation(B)
    B_bar = B @ Q.T
    psi_bar = [Q[k, 0] * psi[0] + Q[k, 1] * psi[1] for k in range(2)]
    gram = _gram(inner, list(tangents))
    return CoefficientMatrices(a=a, B=B, Q=Q, B_bar=B_bar, psi_bar=psi_bar, gram=gram)


def procrustes_align(base, new, inner):
    """Rotate/reflect the basis ``new`` to best match ``base`` (gauge fixing)."""
    M = np.array([[inner(b, n) for n in new] for b in base])
    U, _, Vt = np.linalg.svd(M)
    R = (U @ Vt).T  # new @ R ~ base
    return [sum(R[j, i] * new[j] for j in range(len(new))) for i in range(len(base))]
