"""Cosine-spectral discretization of the unit square with Neumann boundaries.

Fields are real arrays of shape ``(n_x, n_y)`` sampled at cell centres
``x_i = (i + 1/2) h_x``; axis 0 is x.  The transform is the orthonormal
DCT-II rescaled so that coefficient ``c[k, l]`` is the L2 inner product of
the field with the L2-normalized mode

    phi_kl(x, y) = a_k a_l cos(pi k x) cos(pi l y),   a_0 = 1, a_k = sqrt(2).

With this convention ``c[0, 0]`` is the mean of the field (the domain has
unit area) and Parseval reads ``||f||_L2^2 = sum(c**2)`` exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import fft

from .errors import NonzeroMean

MEAN_TOL = 1e-10


def F(u):
    """Double-well potential 1/4 (u^2 - 1)^2."""
    return 0.25 * (u * u - 1.0) ** 2


def dF(u):
    return u * u * u - u


def d2F(u):
    return 3.0 * u * u - 1.0


@dataclass(frozen=True)
class Grid:
    """Tensor cell-centred grid on [0, 1]^2."""

    n_x: int
    n_y: int | None = None

    def __post_init__(self):
        if self.n_y is None:
            object.__setattr__(self, "n_y", self.n_x)
        if self.n_x < 2 or self.n_y < 2:
            raise ValueError("grid needs at least two cells per axis")

    @property
    def shape(self):
        return (self.n_x, self.n_y)

    @property
    def h_x(self):
        return 1.0 / self.n_x

    @property
    def h_y(self):
        return 1.0 / self.n_y

    @property
    def cell_area(self):
        return self.h_x * self.h_y

    @cached_property
    def x(self):
        return (np.arange(self.n_x) + 0.5) * self.h_x

    @cached_property
    def y(self):
        return (np.arange(self.n_y) + 0.5) * self.h_y

    @cached_property
    def coords(self):
        """Meshgrid ``(X, Y)`` of node coordinates, ij-indexed."""
        return np.meshgrid(self.x, self.y, indexing="ij")

    @cached_property
    def mu(self):
        """Eigenvalues (pi k)^2 + (pi l)^2 of the Neumann operator -Laplacian."""
        k = np.pi * np.arange(self.n_x)
        l = np.pi * np.arange(self.n_y)
        return k[:, None] ** 2 + l[None, :] ** 2

    @cached_property
    def _mu_inv(self):
        with np.errstate(divide="ignore"):
            inv = 1.0 / self.mu
        inv[0, 0] = 0.0
        return inv

    @cached_property
    def _sqrt_mu(self):
        return np.sqrt(self.mu)

    @cached_property
    def _inv_sqrt_mu(self):
        return np.sqrt(self._mu_inv)

    @cached_property
    def _scale(self):
        return np.sqrt(self.n_x * self.n_y)

    @cached_property
    def dealias_mask(self):
        """2/3-rule mask in cosine index space."""
        kx = np.arange(self.n_x)[:, None] < (2 * self.n_x) // 3
        ky = np.arange(self.n_y)[None, :] < (2 * self.n_y) // 3
        return kx & ky

    # -- transforms ------------------------------------------------------
    def forward(self, f):
        """Field -> L2-normalized cosine coefficients."""
        return fft.dctn(f, type=2, norm="ortho") / self._scale

    def inverse(self, c):
        """Cosine coefficients -> field."""
        return fft.idctn(c * self._scale, type=2, norm="ortho")

    def apply_multiplier(self, f, m):
        return self.inverse(m * self.forward(f))

    def mode(self, k, l):
        """The L2-normalized cosine mode phi_kl sampled on the grid."""
        X, Y = self.coords
        ak = 1.0 if k == 0 else np.sqrt(2.0)
        al = 1.0 if l == 0 else np.sqrt(2.0)
        return ak * al * np.cos(np.pi * k * X) * np.cos(np.pi * l * Y)

    # -- operators -------------------------------------------------------
    def laplacian(self, f):
        """Neumann Laplacian (not its negative)."""
        return self.apply_multiplier(f, -self.mu)

    def check_zero_mean(self, f):
        m = self.mean(f)
        if abs(m) > MEAN_TOL * max(self.norm_l2(f), 1e-300) and abs(m) > 1e-300:
            raise NonzeroMean(f"field mean {m:.3e} is not zero")

    def inv_laplacian_zero_mean(self, f):
        """(-Laplacian)^{-1} on zero-mean fields; the result has zero mean."""
        self.check_zero_mean(f)
        return self.apply_multiplier(f, self._mu_inv)

    def neg_lap_power(self, f, s):
        """(-Laplacian)^s restricted to the zero-mean part (s may be negative)."""
        with np.errstate(divide="ignore"):
            m = self.mu ** s
        m[0, 0] = 0.0
        return self.apply_multiplier(f, m)

    def project_zero_mean(self, f):
        return f - self.mean(f)

    def dealias(self, f):
        return self.inverse(self.forward(f) * self.dealias_mask)

    # -- quadrature, inner products, norms -------------------------------
    def integrate(self, f):
        return float(np.sum(f) * self.cell_area)

    def mean(self, f):
        return float(np.mean(f))

    mass = integrate

    def inner_l2(self, f, g):
        return float(np.sum(f * g) * self.cell_area)

    def inner_hm1(self, f, g):
        """H^{-1} inner product of zero-mean fields (means are ignored)."""
        return float(np.sum(self.forward(f) * self.forward(g) * self._mu_inv))

    def norm_l2(self, f):
        return float(np.sqrt(np.sum(f * f) * self.cell_area))

    def norm_hm1(self, f):
        self.check_zero_mean(f)
        c = self.forward(f)
        return float(np.sqrt(np.sum(c * c * self._mu_inv)))

    def seminorm_h1(self, f):
        """||grad f||_L2 evaluated spectrally."""
        c = self.forward(f)
        return float(np.sqrt(np.sum(c * c * self.mu)))

    def norm_h1(self, f):
        c = self.forward(f)
        return float(np.sqrt(np.sum(c * c * (1.0 + self.mu))))

    def seminorm_h2(self, f):
        """||Laplacian f||_L2."""
        c = self.forward(f)
        return float(np.sqrt(np.sum(c * c * self.mu**2)))

    def norm_h2(self, f):
        c = self.forward(f)
        return float(np.sqrt(np.sum(c * c * (1.0 + self.mu) ** 2)))

    def energy(self, u, eps):
        """Ginzburg-Landau free energy with gradient term evaluated spectrally."""
        if eps <= 0:
            raise ValueError("eps must be positive")
        c = self.forward(u)
        grad2 = float(np.sum(c * c * self.mu))
        return 0.5 * eps**2 * grad2 + self.integrate(F(u))


def laplacian(grid, f):
    return grid.laplacian(f)


def inv_laplacian_zero_mean(grid, f):
    return grid.inv_laplacian_zero_mean(f)


def norm_hm1(grid, f):
    return grid.norm_hm1(f)


def energy(grid, u, eps):
    return grid.energy(u, eps)


def mass(grid, f):
    return grid.integrate(f)


def project_zero_mean(grid, f):
    return grid.project_zero_mean(f)


# -- serialization ----------------------------------------------------------

_MAGIC = b"CHDF"
_HEADER = struct.Struct("<4sII")


def save_field(path, f):
    """Write a field as ``CHDF | n_x | n_y`` followed by row-major float64."""
    f = np.ascontiguousarray(f, dtype="<f8")
    n_x, n_y = f.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, n_x, n_y))
        fh.write(f.tobytes(order="C"))


def load_field(path):
    data = Path(path).read_bytes()
    magic, n_x, n_y = _HEADER.unpack_from(data)
    if magic != _MAGIC:
        raise ValueError(f"{path}: not a field file")
    body = np.frombuffer(data, dtype="<f8", offset=_HEADER.size)
    if body.size != n_x * n_y:
        raise ValueError(f"{path}: truncated field ({body.size} of {n_x * n_y} values)")
    return body.reshape(n_x, n_y).copy()


def save_field_csv(path, grid, f):
    X, Y = grid.coords
    table = np.column_stack([X.ravel(), Y.ravel(), np.asarray(f).ravel()])
    np.savetxt(path, table, delimiter=",", header="x,y,value", comments="", fmt="%.17g")
