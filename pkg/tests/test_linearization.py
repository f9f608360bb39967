import numpy as np
import pytest

from chdroplet.errors import IllConditioned
from chdroplet.linearization import (LinearizedOperator, coefficient_matrices, givens_rotation,
                                     leading_eigenpairs, procrustes_align, subspace_distance,
                                     tangent_alignment)
from chdroplet.spectral import Grid


def _zero_mean(g, rng, smooth=1.0):
    c = rng.standard_normal(g.shape) / (1.0 + g.mu) ** (smooth / 2)
    c[0, 0] = 0.0
    return g.inverse(c)


@pytest.fixture(scope="module")
def state06(family06):
    return family06.build((0.5, 0.5), second=False)


@pytest.fixture(scope="module")
def ch06(grid64, state06):
    return LinearizedOperator(grid64, state06.field, 0.06)


@pytest.fixture(scope="module")
def eig06(ch06):
    return leading_eigenpairs(ch06)


class TestOperator:
    def test_symmetric_in_hm1(self, ch06, grid64, rng):
        a, b = _zero_mean(grid64, rng), _zero_mean(grid64, rng)
        lhs = grid64.inner_hm1(ch06.apply(a), b)
        rhs = grid64.inner_hm1(a, ch06.apply(b))
        assert np.isclose(lhs, rhs, rtol=1e-10)

    def test_quadratic_form_identity(self, ch06, grid64, rng):
        v = _zero_mean(grid64, rng, smooth=2.0)
        direct = -0.06**2 * grid64.seminorm_h1(v) ** 2 - grid64.inner_l2(ch06.potential * v, v)
        assert np.isclose(ch06.quadratic_form(v), direct, rtol=1e-10)

    def test_shares_form_with_allen_cahn(self, grid64, state06, rng):
        # <L v, v>_{H^-1} = <A v, v>_{L2}
        ch = LinearizedOperator(grid64, state06.field, 0.06)
        ac = LinearizedOperator(grid64, state06.field, 0.06, kind="allen_cahn")
        v = _zero_mean(grid64, rng, smooth=2.0)
        assert np.isclose(ch.quadratic_form(v), ac.quadratic_form(v), rtol=1e-10)

    def test_allen_cahn_preserves_mass(self, grid64, state06, rng):
        ac = LinearizedOperator(grid64, state06.field, 0.06, kind="allen_cahn")
        assert abs(grid64.mean(ac.apply(_zero_mean(grid64, rng)))) < 1e-14

    def test_symmetric_matvec_matches_field_action(self, ch06, grid64, rng):
        v = _zero_mean(grid64, rng)
        x = ch06.field_to_coefficients(v)
        back = ch06.coefficients_to_field(ch06.symmetric_matvec(x))
        assert np.allclose(-ch06.apply(v), back, atol=1e-9 * np.max(np.abs(back)))


class TestEigenpairs:
    def test_constant_state(self):
        # u = 1: F'' = 2 and psi are cosine modes with lam = mu (eps^2 mu + 2)
        g = Grid(32)
        eps = 0.1
        es = leading_eigenpairs(LinearizedOperator(g, np.ones(g.shape), eps))
        mu = np.pi**2 * np.array([1.0, 1.0, 2.0])
        assert np.allclose(es.eigenvalues, mu * (eps**2 * mu + 2.0), rtol=1e-10)

    def test_constant_state_allen_cahn(self):
        g = Grid(32)
        eps = 0.1
        es = leading_eigenpairs(LinearizedOperator(g, np.ones(g.shape), eps, kind="allen_cahn"))
        mu = np.pi**2 * np.array([1.0, 1.0, 2.0])
        assert np.allclose(es.eigenvalues, eps**2 * mu + 2.0, rtol=1e-10)

    def test_eigen_equation(self, ch06, eig06):
        for lam, psi in zip(eig06.eigenvalues, eig06.fields):
            r = ch06.apply(psi) + lam * psi
            assert np.sqrt(ch06.grid.inner_hm1(r, r)) < 1e-6

    def test_orthonormal(self, eig06, grid64):
        G = np.array([[grid64.inner_hm1(a, b) for b in eig06.fields] for a in eig06.fields])
        assert np.allclose(G, np.eye(3), atol=1e-10)

    def test_gap(self, eig06):
        lam = eig06.eigenvalues
        assert max(abs(lam[0]), abs(lam[1])) < 0.01 * lam[2]

    def test_deterministic(self, ch06, eig06):
        again = leading_eigenpairs(ch06)
        assert np.array_equal(again.eigenvalues, eig06.eigenvalues)

    def test_count_validation(self, ch06):
        with pytest.raises(ValueError):
            leading_eigenpairs(ch06, count=2)


class TestSubspaces:
    def test_tangents_near_small_eigenspace(self, eig06, state06, grid64):
        assert tangent_alignment(eig06, state06.tangents, grid64) < 5e-3

    def test_random_subspace_is_far(self, eig06, grid64, rng):
        E = [_zero_mean(grid64, rng) for _ in range(2)]
        assert subspace_distance(grid64.inner_hm1, E, eig06.psi) > 0.5

    def test_distance_zero_for_same_span(self, eig06, grid64):
        E = [eig06.psi[0] + 2 * eig06.psi[1], eig06.psi[1] - eig06.psi[0]]
        assert subspace_distance(grid64.inner_hm1, E, eig06.psi) < 1e-7

    def test_expansion_reproduces_gram(self, eig06, state06, grid64):
        cm = coefficient_matrices(eig06, state06.tangents, grid64)
        # tangents lie (almost) in span psi, so B B^T recovers their Gram matrix
        assert np.allclose(cm.B @ cm.B.T, cm.gram, rtol=1e-4)
        assert abs(cm.B_bar[0, 1]) < 1e-12 * np.max(np.abs(cm.B_bar))
        assert cm.B_bar[0, 0] > 0
        assert np.allclose(cm.Q @ cm.Q.T, np.eye(2))

    def test_ill_conditioned(self, eig06, state06, grid64):
        t = state06.tangents
        with pytest.raises(IllConditioned):
            coefficient_matrices(eig06, (t[0], t[0] + 1e-9 * t[1]), grid64)

    def test_givens(self):
        B = np.array([[3.0, 4.0], [1.0, 2.0]])
        Q = givens_rotation(B)
        Bb = B @ Q.T
        assert abs(Bb[0, 1]) < 1e-15 and np.isclose(Bb[0, 0], 5.0)

    def test_procrustes(self, eig06, grid64):
        th = 0.7
        new = [np.cos(th) * eig06.psi[0] + np.sin(th) * eig06.psi[1],
               -np.sin(th) * eig06.psi[0] + np.cos(th) * eig06.psi[1]]
        back = procrustes_align(eig06.psi, new, grid64.inner_hm1)
        for a, b in zip(back, eig06.psi):
            assert np.allclose(a, b, atol=1e-10)
