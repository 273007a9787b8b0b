"""Flexible GMRES with restart, preconditioned by arbitrary operators."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import BreakdownError, ConfigurationError


@dataclass(eq=False)
class LinearOperator:
    """A square operator given by its dimension and an apply callback."""

    n: int
    apply: callable

    def __call__(self, v):
        return self.apply(v)

    @classmethod
    def from_matrix(cls, A):
        if sp.issparse(A):
            n = A.shape[0]
            return cls(n=n, apply=lambda v: A @ v)
        A = np.asarray(A, dtype=float)
        return cls(n=A.shape[0], apply=lambda v: A @ v)


def as_operator(A) -> LinearOperator:
    if isinstance(A, LinearOperator):
        return A
    if callable(A):
        raise ConfigurationError("bare callables need a dimension; wrap in LinearOperator")
    return LinearOperator.from_matrix(A)


def check_linearity(op: LinearOperator, rng=None, rel_tol: float = 1e-10) -> float:
    """Max relative deviation of apply(a*u + b*v) from a*apply(u) + b*apply(v)."""
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for _ in range(3):
        u = rng.standard_normal(op.n)
        v = rng.standard_normal(op.n)
        al, be = rng.standard_normal(2)
        lhs = op.apply(al * u + be * v)
        rhs = al * op.apply(u) + be * op.apply(v)
        scale = max(np.linalg.norm(rhs), 1e-30)
        worst = max(worst, np.linalg.norm(lhs - rhs) / scale)
    if worst > rel_tol:
        raise ConfigurationError(f"operator is not linear to tolerance: {worst:.3e}")
    return worst


@dataclass
class SolveReport:
    """Iteration counts and residual history of one solve."""

    iterations: int
    converged: bool
    history: list = field(default_factory=list)  # relative residuals per inner iteration
    restart: int = 50
    metadata: dict = field(default_factory=dict)

    @property
    def status(self) -> str:
        return str(self.iterations) if self.converged else "F"

    def save_history_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "relres"])
            for i, r in enumerate(self.history, start=1):
                w.writerow([i, r])


def make_rhs(n: int, seed: int) -> np.ndarray:
    """Reproducible right-hand side with i.i.d. entries in [-0.5, 0.5]."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.5, 0.5, size=n)


def fgmres(A, M=None, b=None, m: int = 50, tol: float = 1e-6,
           max_it: int = 500, x0=None):
    """Right-preconditioned flexible GMRES(m).

    ``M`` applies an approximation of A^{-1}; it may be a LinearOperator or a
    bare callable and is allowed to change between iterations (the
    preconditioned directions are stored).  Convergence is declared on the
    true relative residual ||b - A x|| / ||b|| <= tol.  Returns
    ``(x, SolveReport)``; a report with ``converged=False`` means the cap was
    reached ("F").
    """
    if b is None:
        raise ConfigurationError("right-hand side b is required")
    A = as_operator(A)
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    if A.n != n:
        raise ConfigurationError(f"dimension mismatch: operator {A.n}, rhs {n}")
    if m < 1:
        raise ConfigurationError(f"restart must be >= 1, got {m}")
    apply_M = None
    if M is not None:
        apply_M = M.apply if isinstance(M, LinearOperator) else M

    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        report = SolveReport(iterations=0, converged=True, history=[0.0], restart=m)
        return np.zeros(n), report

    t_start = time.perf_counter()
    history = []
    total_it = 0
    converged = False
    breakdown_unresolved = False

    while total_it < max_it and not converged:
        r = b - A.apply(x)
        beta = np.linalg.norm(r)
        if beta / bnorm <= tol:
            converged = True
            if history:
                history[-1] = beta / bnorm
            else:
                history.append(beta / bnorm)
            break
        V = np.zeros((m + 1, n))
        Z = np.zeros((m, n))
        H = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        V[0] = r / beta
        j_used = 0

        for j in range(m):
            z = apply_M(V[j]) if apply_M is not None else V[j].copy()
            Z[j] = z
            w = A.apply(z)
            wnorm0 = np.linalg.norm(w)
            for i in range(j + 1):
                hij = V[i] @ w
                H[i, j] += hij
                w -= hij * V[i]
            # one reorthogonalization pass when orthogonality degrades
            corr = V[: j + 1] @ w
            if np.linalg.norm(corr) > 1e-8 * max(np.linalg.norm(w), 1e-300):
                w -= V[: j + 1].T @ corr
                H[: j + 1, j] += corr
            hj1 = np.linalg.norm(w)
            H[j + 1, j] = hj1
            breakdown = hj1 <= 1e-14 * max(wnorm0, 1.0)
            if not breakdown:
                V[j + 1] = w / hj1

            # apply accumulated Givens rotations to the new column
            for i in range(j):
                t = cs[i] * H[i, j] + sn[i] * H[i + 1, j]
                H[i + 1, j] = -sn[i] * H[i, j] + cs[i] * H[i + 1, j]
                H[i, j] = t
            denom = np.hypot(H[j, j], H[j + 1, j])
            if denom == 0.0:
                cs[j], sn[j] = 1.0, 0.0
            else:
                cs[j] = H[j, j] / denom
                sn[j] = H[j + 1, j] / denom
            H[j, j] = cs[j] * H[j, j] + sn[j] * H[j + 1, j]
            H[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]

            j_used = j + 1
            total_it += 1
            est = abs(g[j + 1]) / bnorm
            history.append(est)

            if breakdown:
                # lucky breakdown: the Krylov space is exhausted
                x_try = x + _form_update(Z, H, g, j_used)
                true_rel = np.linalg.norm(b - A.apply(x_try)) / bnorm
                history[-1] = true_rel
                if true_rel <= tol:
                    x = x_try
                    converged = True
                else:
                    breakdown_unresolved = True
                    x = x_try
                break

            if est <= tol or total_it >= max_it:
                x_try = x + _form_update(Z, H, g, j_used)
                true_rel = np.linalg.norm(b - A.apply(x_try)) / bnorm
                if est <= tol:
                    history[-1] = true_rel
                if true_rel <= tol:
                    x = x_try
                    converged = True
                    break
                if total_it >= max_it:
                    x = x_try
                    break
                # estimate was optimistic; keep iterating within this cycle
            if total_it >= max_it:
                x = x + _form_update(Z, H, g, j_used)
                break
        else:
            # restart: fold the cycle into x and continue
            x = x + _form_update(Z, H, g, j_used)
        if breakdown_unresolved:
            break

    wall = time.perf_counter() - t_start
    report = SolveReport(
        iterations=total_it, converged=converged, history=history, restart=m,
        metadata={"wall_time_s": wall, "tol": tol, "max_it": max_it},
    )
    if breakdown_unresolved:
        raise BreakdownError(
            f"Arnoldi breakdown at iteration {total_it} with residual above tol "
            f"({history[-1]:.3e} > {tol:.1e})")
    return x, report


def _form_update(Z, H, g, k):
    """Solve the k x k triangular least-squares system and expand through Z."""
    if k == 0:
        return np.zeros(Z.shape[1])
    y = np.zeros(k)
    for i in range(k - 1, -1, -1):
        rhs = g[i] - H[i, i + 1 : k] @ y[i + 1 : k]
        # a zero pivot only arises at exact breakdown; that direction adds nothing
        y[i] = 0.0 if abs(H[i, i]) < 1e-300 else rhs / H[i, i]
    return Z[:k].T @ y
