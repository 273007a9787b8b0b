"""Flexible GMRES correctness, flexibility, and reporting tests."""

import numpy as np
import pytest

from greenprec import krylov, pde
from greenprec.errors import ConfigurationError


def reaction_system(n):
    g = pde.make_grid(1, n)
    A = pde.assemble(g, pde.reaction_1d())
    return A.toarray()


class TestMakeRhs:
    def test_deterministic(self):
        np.testing.assert_array_equal(krylov.make_rhs(64, 5), krylov.make_rhs(64, 5))

    def test_bounds(self):
        b = krylov.make_rhs(4096, 9)
        assert np.all(b >= -0.5) and np.all(b <= 0.5)

    def test_mean_statistics(self):
        n = 100_000
        b = krylov.make_rhs(n, 21)
        sigma_mean = (1.0 / np.sqrt(12.0)) / np.sqrt(n)
        assert abs(b.mean()) <= 3 * sigma_mean


class TestLinearOperator:
    def test_linearity_check(self):
        op = krylov.LinearOperator.from_matrix(np.diag([1.0, 2.0, 3.0]))
        assert krylov.check_linearity(op) <= 1e-10

    def test_nonlinear_rejected(self):
        op = krylov.LinearOperator(n=3, apply=lambda v: v + 1.0)
        with pytest.raises(ConfigurationError):
            krylov.check_linearity(op)

    def test_bare_callable_rejected(self):
        with pytest.raises(ConfigurationError):
            krylov.as_operator(lambda v: v)


class TestFgmres:
    def test_identity_single_iteration(self):
        b = krylov.make_rhs(40, 3)
        x, rep = krylov.fgmres(np.eye(40), b=b, m=50, tol=1e-10, max_it=100)
        assert rep.converged and rep.iterations == 1
        np.testing.assert_allclose(x, b, atol=1e-12)

    def test_exact_inverse_two_iterations(self):
        A = reaction_system(256)
        Ainv = pde.dense_inverse(A)
        M = krylov.LinearOperator(n=256, apply=lambda v: Ainv @ v)
        b = krylov.make_rhs(256, 11)
        _, rep = krylov.fgmres(A, M=M, b=b, m=50, tol=1e-6, max_it=500)
        assert rep.converged and rep.iterations <= 2

    def test_unpreconditioned_large_reaction_fails(self):
        A = reaction_system(2048)
        b = krylov.make_rhs(2048, 11)
        _, rep = krylov.fgmres(A, b=b, m=50, tol=1e-6, max_it=500)
        assert rep.status == "F"
        assert not rep.converged and rep.iterations == 500

    def test_matches_dense_lu_spd(self):
        rng = np.random.default_rng(4)
        Q = rng.standard_normal((150, 150))
        A = Q @ Q.T + 150 * np.eye(150)
        b = rng.standard_normal(150)
        x, rep = krylov.fgmres(A, b=b, m=50, tol=1e-10, max_it=500)
        x_lu = np.linalg.solve(A, b)
        assert rep.converged
        assert np.linalg.norm(x - x_lu) / np.linalg.norm(x_lu) <= 1e-8

    def test_matches_dense_lu_nonsymmetric(self):
        rng = np.random.default_rng(5)
        A = rng.standard_normal((180, 180)) + 30 * np.eye(180)
        b = rng.standard_normal(180)
        x, rep = krylov.fgmres(A, b=b, m=40, tol=1e-10, max_it=500)
        x_lu = np.linalg.solve(A, b)
        assert rep.converged
        assert np.linalg.norm(x - x_lu) / np.linalg.norm(x_lu) <= 1e-8

    def test_flexible_alternating_preconditioner(self):
        # the preconditioner changes every application; plain GMRES theory
        # does not cover this, the flexible variant must still converge
        rng = np.random.default_rng(6)
        Q = rng.standard_normal((120, 120))
        A = Q @ Q.T + 120 * np.eye(120)
        D1 = 1.0 / np.diag(A)
        D2 = np.full(120, 1.0 / np.trace(A) * 120)
        state = {"k": 0}

        def M(v):
            state["k"] += 1
            return (D1 if state["k"] % 2 else D2) * v

        b = rng.standard_normal(120)
        x, rep = krylov.fgmres(A, M=M, b=b, m=30, tol=1e-10, max_it=500)
        assert rep.converged
        assert np.linalg.norm(b - A @ x) / np.linalg.norm(b) <= 1e-10

    def test_residual_faithfulness_and_restart_monotonicity(self):
        A = reaction_system(128)
        b = krylov.make_rhs(128, 2)
        tol = 1e-8
        x, rep = krylov.fgmres(A, b=b, m=20, tol=tol, max_it=2000)
        assert rep.converged
        true_rel = np.linalg.norm(b - A @ x) / np.linalg.norm(b)
        assert abs(rep.history[-1] - true_rel) <= 10 * tol
        assert rep.history[-1] <= tol
        # nonincreasing across restart boundaries
        for k in range(rep.restart, rep.iterations, rep.restart):
            assert rep.history[k] <= rep.history[k - 1] * (1 + 1e-10)

    def test_history_length_matches_iterations(self):
        A = reaction_system(64)
        b = krylov.make_rhs(64, 8)
        _, rep = krylov.fgmres(A, b=b, m=50, tol=1e-6, max_it=500)
        assert len(rep.history) == rep.iterations

    def test_zero_rhs(self):
        x, rep = krylov.fgmres(np.eye(5), b=np.zeros(5), m=5, tol=1e-8, max_it=10)
        assert rep.converged and np.all(x == 0)

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigurationError):
            krylov.fgmres(np.eye(4), b=np.ones(5), m=5)

    def test_report_csv(self, tmp_path):
        A = reaction_system(64)
        b = krylov.make_rhs(64, 8)
        _, rep = krylov.fgmres(A, b=b, m=50, tol=1e-6, max_it=500)
        path = tmp_path / "hist.csv"
        rep.save_history_csv(path)
        data = np.loadtxt(path, delimiter=",", skiprows=1)
        assert data.shape[0] == rep.iterations
