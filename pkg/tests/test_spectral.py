import numpy as np
import pytest

from chdroplet.errors import NonzeroMean
from chdroplet.spectral import F, Grid, dF, d2F, load_field, save_field, save_field_csv


class TestTransforms:
    def test_round_trip(self, rng):
        g = Grid(32, 24)
        f = rng.standard_normal(g.shape)
        assert np.allclose(g.inverse(g.forward(f)), f, atol=1e-13)

    def test_parseval(self, rng):
        g = Grid(48)
        f = rng.standard_normal(g.shape)
        c = g.forward(f)
        assert np.isclose(np.sum(c * c), g.inner_l2(f, f), rtol=1e-12)

    def test_mode_is_eigenfunction(self):
        g = Grid(40)
        phi = g.mode(3, 2)
        lap = g.laplacian(phi)
        mu = np.pi**2 * (3**2 + 2**2)
        assert np.allclose(lap, -mu * phi, atol=1e-9 * mu)
        assert np.isclose(g.norm_l2(phi), 1.0)

    def test_laplacian_against_finite_differences(self):
        g = Grid(256)
        X, Y = g.coords
        # smooth field with zero normal derivative on the boundary
        f = np.cos(np.pi * X) * np.cos(2 * np.pi * Y) + 0.3 * np.cos(3 * np.pi * X)
        exact = -np.pi**2 * (1 + 4) * np.cos(np.pi * X) * np.cos(2 * np.pi * Y) \
            - 0.3 * 9 * np.pi**2 * np.cos(3 * np.pi * X)
        h = g.h_x
        fp = np.pad(f, 1, mode="symmetric")
        fd = (fp[2:, 1:-1] + fp[:-2, 1:-1] + fp[1:-1, 2:] + fp[1:-1, :-2] - 4 * f) / h**2
        lap = g.laplacian(f)
        assert np.max(np.abs(lap - exact)) < 1e-9
        # the 5-point stencil is second order; spectral agrees to O(h^2)
        assert np.max(np.abs(fd - lap)) < 2.0 * np.pi**4 * 25 * h**2


class TestNorms:
    def test_hm1_of_single_mode(self):
        g = Grid(32)
        phi = g.mode(2, 1)
        mu = np.pi**2 * 5
        assert np.isclose(g.norm_hm1(phi) ** 2, 1.0 / mu)

    def test_hm1_rejects_mass(self):
        g = Grid(16)
        with pytest.raises(NonzeroMean):
            g.norm_hm1(np.ones(g.shape))

    def test_inverse_laplacian(self, rng):
        g = Grid(32)
        f = g.project_zero_mean(rng.standard_normal(g.shape))
        w = g.inv_laplacian_zero_mean(f)
        assert np.allclose(-g.laplacian(w), f, atol=1e-10)
        assert abs(g.mean(w)) < 1e-14

    def test_hm1_inner_is_l2_pairing_with_inverse(self, rng):
        g = Grid(32)
        a = g.project_zero_mean(rng.standard_normal(g.shape))
        b = g.project_zero_mean(rng.standard_normal(g.shape))
        lhs = g.inner_hm1(a, b)
        rhs = g.inner_l2(g.inv_laplacian_zero_mean(a), b)
        assert np.isclose(lhs, rhs, rtol=1e-10)


class TestPotential:
    def test_derivatives(self):
        u = np.linspace(-1.5, 1.5, 31)
        h = 1e-6
        assert np.allclose((F(u + h) - F(u - h)) / (2 * h), dF(u), atol=1e-8)
        assert np.allclose((dF(u + h) - dF(u - h)) / (2 * h), d2F(u), atol=1e-8)

    def test_kink_energy(self):
        # a planar tanh interface carries energy 2*sqrt(2)/3 * eps per unit length
        eps = 0.03
        g = Grid(256)
        X, _ = g.coords
        u = np.tanh((X - 0.5) / (np.sqrt(2) * eps))
        assert np.isclose(g.energy(u, eps), 2 * np.sqrt(2) / 3 * eps, rtol=1e-6)


class TestSerialization:
    def test_binary_round_trip(self, tmp_path, rng):
        f = rng.standard_normal((12, 9))
        save_field(tmp_path / "a.field", f)
        assert np.array_equal(load_field(tmp_path / "a.field"), f)

    def test_truncated_file(self, tmp_path, rng):
        p = tmp_path / "b.field"
        save_field(p, rng.standard_normal((8, 8)))
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(ValueError):
            load_field(p)

    def test_csv(self, tmp_path):
        g = Grid(4)
        save_field_csv(tmp_path / "c.csv", g, np.arange(16.0).reshape(4, 4))
        table = np.loadtxt(tmp_path / "c.csv", delimiter=",", skiprows=1)
        assert table.shape == (16, 3)
        assert table[5, 2] == 5.0
