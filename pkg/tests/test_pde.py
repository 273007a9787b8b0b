"""Grid, assembly, dense-inverse, and anchor tests with independent oracles."""

import numpy as np
import pytest
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from greenprec import pde
from greenprec.errors import (
    ConfigurationError,
    FactorizationError,
    SizeError,
    UnsupportedStencilError,
)


def analytic_poisson_green(x, y):
    """G(x,y) = min(x,y) (1 - max(x,y)) for -u'' on [0,1], Dirichlet."""
    return np.minimum(x, y) * (1.0 - np.maximum(x, y))


class TestGrid:
    def test_1d_example(self):
        g = pde.make_grid(1, 3)
        np.testing.assert_allclose(g.interior_points[:, 0], [0.25, 0.5, 0.75])
        assert g.h == 0.25
        np.testing.assert_allclose(g.boundary_points[:, 0], [0.0, 1.0])

    def test_2d_example(self):
        g = pde.make_grid(2, 2)
        expected = np.array([[1, 1], [2, 1], [1, 2], [2, 2]]) / 3.0
        np.testing.assert_allclose(g.interior_points, expected)

    def test_large_1d_counts(self):
        g = pde.make_grid(1, 256)
        assert g.n_interior == 256
        assert g.boundary_points.shape[0] == 2

    def test_2d_boundary_count(self):
        g = pde.make_grid(2, 5)
        # all perimeter nodes of the (n+2)^2 lattice, corners once
        assert g.boundary_points.shape[0] == 4 * (5 + 1)

    def test_index_roundtrip(self):
        g = pde.make_grid(2, 7)
        for i in range(g.n_interior):
            assert g.index_of(g.coords_of(i)) == i

    def test_invalid_args(self):
        with pytest.raises(ConfigurationError):
            pde.make_grid(3, 4)
        with pytest.raises(ConfigurationError):
            pde.make_grid(1, 1)

    def test_off_grid_coords_rejected(self):
        g = pde.make_grid(1, 4)
        with pytest.raises(ConfigurationError):
            g.index_of([0.3])


class TestAssemble:
    def test_poisson_1d_stencil(self):
        g = pde.make_grid(1, 3)
        A = pde.assemble(g, pde.poisson_1d()).toarray()
        expected = (1.0 / g.h) * (np.diag([2.0, 2, 2]) + np.diag([-1.0, -1], 1)
                                  + np.diag([-1.0, -1], -1))
        np.testing.assert_allclose(A, expected, atol=1e-12)

    def test_reaction_diagonal(self):
        g = pde.make_grid(1, 8)
        A = pde.assemble(g, pde.reaction_1d()).toarray()
        x = g.interior_points[:, 0]
        expected_diag = 2.0 / g.h + g.h * (-50.0 * (1.0 + x**2))
        np.testing.assert_allclose(np.diag(A), expected_diag, rtol=1e-13)

    def test_hd_scaling_contract(self):
        # the scaled matrix equals h^d times a hand-rolled unscaled stencil
        g = pde.make_grid(1, 6)
        coeffs = pde.reaction_1d()
        A = pde.assemble(g, coeffs).toarray()
        h, n = g.h, g.n
        A0 = np.zeros((n, n))
        for i in range(n):
            x = (i + 1) * h
            A0[i, i] = 2.0 / h**2 - 50.0 * (1 + x**2)
            if i > 0:
                A0[i, i - 1] = -1.0 / h**2
            if i < n - 1:
                A0[i, i + 1] = -1.0 / h**2
        np.testing.assert_allclose(A, h * A0, rtol=1e-13)

    def test_rotated_isotropic_reduces_to_five_point(self):
        g = pde.make_grid(2, 6)
        iso = pde.rotated_laplacian_2d(xi=1.0, theta=0.37)
        A9 = pde.assemble(g, iso, "central").toarray()
        ident = pde.CoefficientField(
            dim=2, a=lambda x, p: ((1.0, 0.0), (0.0, 1.0)),
            b=lambda x, p: (0.0, 0.0), c=lambda x, p: 0.0,
            div_a=lambda x, p: (0.0, 0.0))
        A5 = pde.assemble(g, ident, "central").toarray()
        np.testing.assert_allclose(A9, A5, atol=1e-12)

    def test_cross_terms_need_central_9pt(self):
        g = pde.make_grid(2, 4)
        rot = pde.rotated_laplacian_2d(xi=0.1, theta=0.3)
        with pytest.raises(UnsupportedStencilError):
            pde.assemble(g, rot, "upwind_convection")
        g1 = pde.make_grid(1, 4)
        with pytest.raises(ConfigurationError):
            pde.assemble(g1, rot)

    def test_upwind_m_matrix(self):
        # convection-dominated upwind matrices stay M-matrices
        coeffs = pde.convection_1d()
        for n in (16, 64, 256):
            g = pde.make_grid(1, n)
            A = pde.assemble(g, coeffs, "upwind_convection").toarray()
            off = A - np.diag(np.diag(A))
            assert np.all(off <= 1e-14)
            assert np.all(A.sum(axis=1) >= -1e-10)

    def test_csr_contract(self):
        g = pde.make_grid(2, 5)
        A = pde.assemble(g, pde.convection_2d(), "upwind_convection")
        assert isinstance(A, sp.csr_array)
        indptr, indices = A.indptr, A.indices
        for i in range(A.shape[0]):
            row = indices[indptr[i]:indptr[i + 1]]
            assert np.all(np.diff(row) > 0)  # sorted, unique
        dense = A.toarray()
        for j in (0, 7, 24):
            e = np.zeros(A.shape[1])
            e[j] = 1.0
            np.testing.assert_array_equal(A @ e, dense[:, j])

    def test_order_of_accuracy(self):
        # manufactured  u = sin(pi x): nodal error slope ~ h^2
        coeffs = pde.poisson_1d()
        errs, hs = [], []
        for n in (16, 32, 64, 128):
            g = pde.make_grid(1, n)
            A = pde.assemble(g, coeffs)
            x = g.interior_points[:, 0]
            f = np.pi**2 * np.sin(np.pi * x)
            u = spla.spsolve(A.tocsc(), g.h * f)
            errs.append(np.max(np.abs(u - np.sin(np.pi * x))))
            hs.append(g.h)
        slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
        assert 1.8 <= slope <= 2.2


class TestDenseInverse:
    def test_identity(self):
        np.testing.assert_array_equal(pde.dense_inverse(np.eye(3)), np.eye(3))

    def test_poisson_green_identity(self):
        g = pde.make_grid(1, 34)
        A = pde.assemble(g, pde.poisson_1d())
        G = pde.dense_inverse(A)
        x = g.interior_points[:, 0]
        Gan = analytic_poisson_green(x[:, None], x[None, :])
        np.testing.assert_allclose(G, Gan, atol=1e-12)

    def test_random_diagonally_dominant(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((10, 10))
        A += np.diag(10 + np.abs(A).sum(axis=1))
        inv = pde.dense_inverse(A)
        assert np.max(np.abs(A @ inv - np.eye(10))) < 1e-10

    def test_size_cap(self):
        with pytest.raises(SizeError):
            pde.dense_inverse(np.eye(11), cap=10)

    def test_singular(self):
        with pytest.raises(FactorizationError):
            pde.dense_inverse(np.zeros((4, 4)))


class TestAnchors:
    def test_1d_counts_and_grid_membership(self):
        anchors = pde.generate_anchors(pde.poisson_1d(), 34)
        assert len(anchors) == 34 * 34
        assert np.all(np.isfinite(anchors.g))
        g = pde.make_grid(1, 34)
        for pt in (anchors.x[17], anchors.y[1103]):
            g.index_of(pt)  # raises if off the coarse grid

    def test_poisson_anchor_values_nodally_exact(self):
        anchors = pde.generate_anchors(pde.poisson_1d(), 34)
        expected = analytic_poisson_green(anchors.x[:, 0], anchors.y[:, 0])
        np.testing.assert_allclose(anchors.g, expected, atol=1e-12)

    def test_2d_counts(self):
        anchors = pde.generate_anchors(pde.reaction_2d(), 6)
        assert len(anchors) == 36 * 36

    def test_parametric_blocks(self):
        angles = [0.0, np.pi / 4, np.pi / 2, 3 * np.pi / 4]
        anchors = pde.generate_anchors(
            pde.rotated_laplacian_2d(xi=0.1), 4, params=[(a,) for a in angles])
        assert len(anchors) == 4 * 16 * 16
        assert anchors.param_values.shape == (len(anchors), 1)
        np.testing.assert_allclose(np.unique(anchors.param_values), angles)

    def test_serialization_roundtrip(self, tmp_path):
        anchors = pde.generate_anchors(pde.reaction_1d(), 5)
        path = tmp_path / "anchors.npz"
        anchors.save_npz(path)
        back = pde.AnchorSet.load_npz(path)
        np.testing.assert_array_equal(back.g, anchors.g)
        np.testing.assert_array_equal(back.x, anchors.x)
        csv_path = tmp_path / "anchors.csv"
        anchors.save_csv(csv_path)
        data = np.loadtxt(csv_path, delimiter=",", skiprows=1)
        assert data.shape == (25, 3)
        np.testing.assert_allclose(data[:, 2], anchors.g)
