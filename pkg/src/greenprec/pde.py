"""Model problems, finite-difference assembly, and coarse-grid anchor data.

Discretizations live on uniform tensor grids over [0,1]^d with homogeneous
Dirichlet boundaries eliminated.  Stiffness matrices carry the mesh-volume
factor h^d so that their inverses approximate the kernel of the continuous
inverse operator entrywise (A^{-1})_{ij} ~ G(x_i, x_j).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from .errors import (
    ConfigurationError,
    FactorizationError,
    SizeError,
    UnsupportedStencilError,
)

DENSE_CAP_DEFAULT = 5000


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Grid:
    """Uniform tensor grid on [0,1]^dim with n interior points per axis.

    Interior points are ordered lexicographically with the first coordinate
    varying fastest; ``index_of`` and ``coords_of`` are mutual inverses.
    """

    dim: int
    n: int
    h: float
    interior_points: np.ndarray  # (n^dim, dim)
    boundary_points: np.ndarray  # (m, dim)

    @property
    def n_interior(self) -> int:
        return self.interior_points.shape[0]

    def index_of(self, coords) -> int:
        coords = np.atleast_1d(np.asarray(coords, dtype=float))
        idx = np.rint(coords / self.h).astype(int) - 1
        if np.any(idx < 0) or np.any(idx >= self.n):
            raise ConfigurationError(f"coordinates {coords} are not interior grid nodes")
        if not np.allclose((idx + 1) * self.h, coords, atol=1e-9 * self.h):
            raise ConfigurationError(f"coordinates {coords} do not lie on the grid")
        flat = 0
        for d in reversed(range(self.dim)):
            flat = flat * self.n + idx[d]
        return int(flat)

    def coords_of(self, index: int) -> np.ndarray:
        if not 0 <= index < self.n_interior:
            raise ConfigurationError(f"interior index {index} out of range")
        return self.interior_points[index].copy()


def make_grid(dim: int, n: int) -> Grid:
    """Build the uniform grid with spacing h = 1/(n+1).

    dim must be 1 or 2 and n >= 2.
    """
    if dim not in (1, 2):
        raise ConfigurationError(f"dim must be 1 or 2, got {dim}")
    if n < 2:
        raise ConfigurationError(f"n must be >= 2, got {n}")
    h = 1.0 / (n + 1)
    axis = (np.arange(1, n + 1)) * h
    if dim == 1:
        interior = axis.reshape(-1, 1)
        boundary = np.array([[0.0], [1.0]])
    else:
        xx, yy = np.meshgrid(axis, axis, indexing="xy")  # x fastest
        interior = np.column_stack([xx.ravel(), yy.ravel()])
        full = np.concatenate([[0.0], axis, [1.0]])
        bpts = []
        for x in full:
            bpts.append((x, 0.0))
        for x in full:
            bpts.append((x, 1.0))
        for y in axis:
            bpts.append((0.0, y))
        for y in axis:
            bpts.append((1.0, y))
        boundary = np.array(bpts)
    return Grid(dim=dim, n=n, h=h, interior_points=interior, boundary_points=boundary)


# ---------------------------------------------------------------------------
# Coefficient fields
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class CoefficientField:
    """Coefficients of  L u = -div(a grad u) + b . grad u + c u  on [0,1]^dim.

    The callables take ``(x, p)`` where ``x`` indexes like ``x[0], x[1]`` and
    ``p`` is an optional parameter vector; they return nested tuples of
    scalars so that the same definitions evaluate on plain floats (assembly)
    and on traced values (operator application inside the neural kernel).

    ``div_a`` is the row divergence (div a)_j = sum_i d a_ij / d x_i; None
    means identically zero (constant or divergence-free tensor).
    """

    dim: int
    a: callable
    b: callable
    c: callable
    div_a: callable = None
    params: tuple = None
    has_cross_terms: bool = False
    name: str = ""

    def a_matrix(self, x, p=None) -> np.ndarray:
        p = self._p(p)
        return np.array(self.a(x, p), dtype=float).reshape(self.dim, self.dim)

    def b_vector(self, x, p=None) -> np.ndarray:
        p = self._p(p)
        return np.array(self.b(x, p), dtype=float).reshape(self.dim)

    def c_scalar(self, x, p=None) -> float:
        p = self._p(p)
        return float(self.c(x, p))

    def div_a_vector(self, x, p=None) -> np.ndarray:
        if self.div_a is None:
            return np.zeros(self.dim)
        p = self._p(p)
        return np.array(self.div_a(x, p), dtype=float).reshape(self.dim)

    def _p(self, p):
        return self.params if p is None else p


def poisson_1d() -> CoefficientField:
    return CoefficientField(
        dim=1,
        a=lambda x, p: ((1.0,),),
        b=lambda x, p: (0.0,),
        c=lambda x, p: 0.0,
        name="poisson_1d",
    )


def shifted_laplacian_1d(shift: float = 50.0) -> CoefficientField:
    """-u'' - shift * u; indefinite once shift exceeds the first eigenvalue."""
    return CoefficientField(
        dim=1,
        a=lambda x, p: ((1.0,),),
        b=lambda x, p: (0.0,),
        c=lambda x, p: -shift,
        name="shifted_laplacian_1d",
    )


def convection_1d() -> CoefficientField:
    """Convection-dominated: a = 0.01, b = 1 + x^2, c = 0."""
    return CoefficientField(
        dim=1,
        a=lambda x, p: ((0.01,),),
        b=lambda x, p: (1.0 + x[0] ** 2,),
        c=lambda x, p: 0.0,
        name="convection_1d",
    )


def reaction_1d() -> CoefficientField:
    """Reaction-dominated and indefinite: a = 1, b = 0, c = -50(1 + x^2)."""
    return CoefficientField(
        dim=1,
        a=lambda x, p: ((1.0,),),
        b=lambda x, p: (0.0,),
        c=lambda x, p: -50.0 * (1.0 + x[0] ** 2),
        name="reaction_1d",
    )


def variable_diffusion_1d(eps: float, lam: float) -> CoefficientField:
    """Pure diffusion with a(x) = eps^((2x-1)(2*lam-1)); b = c = 0."""
    log_eps = math.log(eps)

    def a_fn(x, p):
        return ((eps ** ((2.0 * x[0] - 1.0) * (2.0 * lam - 1.0)),),)

    def div_a_fn(x, p):
        val = eps ** ((2.0 * x[0] - 1.0) * (2.0 * lam - 1.0))
        return (val * log_eps * 2.0 * (2.0 * lam - 1.0),)

    return CoefficientField(
        dim=1, a=a_fn, b=lambda x, p: (0.0,), c=lambda x, p: 0.0,
        div_a=div_a_fn, name="variable_diffusion_1d",
    )


def convection_2d() -> CoefficientField:
    """2D convection-dominated problem with isotropic variable diffusion."""

    def a_fn(x, p):
        d = 0.01 * (1.0 + x[0] ** 2 + x[1] ** 2)
        return ((d, 0.0), (0.0, d))

    def div_a_fn(x, p):
        return (0.02 * x[0], 0.02 * x[1])

    return CoefficientField(
        dim=2,
        a=a_fn,
        b=lambda x, p: (1.0 + x[1] ** 2, 1.0 + x[0] ** 2),
        c=lambda x, p: 0.0,
        div_a=div_a_fn,
        name="convection_2d",
    )


def reaction_2d() -> CoefficientField:
    return CoefficientField(
        dim=2,
        a=lambda x, p: ((1.0, 0.0), (0.0, 1.0)),
        b=lambda x, p: (0.0, 0.0),
        c=lambda x, p: -10.0 * (1.0 + x[0] ** 2 + x[1] ** 2),
        name="reaction_2d",
    )


def rotated_laplacian_2d(xi: float = 0.1, theta: float = None) -> CoefficientField:
    """Anisotropic diffusion tensor with ratio xi rotated by angle p[0].

    The tensor is constant in x, so div a = 0.  ``theta`` freezes the angle;
    leave it None to evaluate with per-call parameters.
    """
    import jax.numpy as jnp

    def a_fn(x, p):
        th = p[0]
        ct, st = jnp.cos(th), jnp.sin(th)
        return (
            (ct**2 + xi * st**2, ct * st * (1.0 - xi)),
            (ct * st * (1.0 - xi), st**2 + xi * ct**2),
        )

    return CoefficientField(
        dim=2,
        a=a_fn,
        b=lambda x, p: (0.0, 0.0),
        c=lambda x, p: 0.0,
        params=None if theta is None else (theta,),
        has_cross_terms=True,
        name="rotated_laplacian_2d",
    )


PROBLEMS = {
    "poisson_1d": poisson_1d,
    "shifted_laplacian_1d": shifted_laplacian_1d,
    "convection_1d": convection_1d,
    "reaction_1d": reaction_1d,
    "variable_diffusion_1d": variable_diffusion_1d,
    "convection_2d": convection_2d,
    "reaction_2d": reaction_2d,
    "rotated_laplacian_2d": rotated_laplacian_2d,
}


# ---------------------------------------------------------------------------
# Assembly
# ---------------------------------------------------------------------------

def assemble(grid: Grid, coeffs: CoefficientField, scheme: str = "central",
             params=None) -> sp.csr_array:
    """Assemble the interior stiffness matrix, scaled by h^dim.

    scheme is ``central`` or ``upwind_convection`` (upwinding applies to the
    convective term only).  Diagonal tensors use the 3-pt (1D) / 5-pt (2D)
    conservative stencil with half-point diffusion averages; a full tensor
    requires the central 9-pt stencil with the cross derivative on the four
    corner nodes.
    """
    if scheme not in ("central", "upwind_convection"):
        raise ConfigurationError(f"unknown scheme {scheme!r}")
    if grid.dim != coeffs.dim:
        raise ConfigurationError(
            f"grid dim {grid.dim} does not match coefficient dim {coeffs.dim}")
    if coeffs.has_cross_terms:
        if scheme != "central" or grid.dim != 2:
            raise UnsupportedStencilError(
                "full diffusion tensors are only supported by the central 9-pt 2D stencil")
        return _assemble_2d_9pt(grid, coeffs, params)
    if grid.dim == 1:
        return _assemble_1d(grid, coeffs, scheme, params)
    return _assemble_2d_5pt(grid, coeffs, scheme, params)


def _assemble_1d(grid, coeffs, scheme, params):
    n, h = grid.n, grid.h
    rows, cols, data = [], [], []

    def add(i, j, v):
        if 0 <= j < n:
            rows.append(i)
            cols.append(j)
            data.append(v)

    for i in range(n):
        x = (i + 1) * h
        am = coeffs.a_matrix((x - 0.5 * h,), params)[0, 0]
        ap = coeffs.a_matrix((x + 0.5 * h,), params)[0, 0]
        bi = coeffs.b_vector((x,), params)[0]
        ci = coeffs.c_scalar((x,), params)

        add(i, i, (am + ap) / h**2 + ci)
        add(i, i - 1, -am / h**2)
        add(i, i + 1, -ap / h**2)

        if scheme == "central":
            add(i, i + 1, bi / (2 * h))
            add(i, i - 1, -bi / (2 * h))
        else:
            if bi >= 0:
                add(i, i, bi / h)
                add(i, i - 1, -bi / h)
            else:
                add(i, i + 1, bi / h)
                add(i, i, -bi / h)

    A = sp.coo_array((data, (rows, cols)), shape=(n, n)).tocsr()
    A.sort_indices()
    return A * h  # h^d with d = 1


def _assemble_2d_5pt(grid, coeffs, scheme, params):
    n, h = grid.n, grid.h
    rows, cols, data = [], [], []

    def flat(ix, iy):
        return iy * n + ix

    def add(row, ix, iy, v):
        if 0 <= ix < n and 0 <= iy < n:
            rows.append(row)
            cols.append(flat(ix, iy))
            data.append(v)

    for iy in range(n):
        for ix in range(n):
            row = flat(ix, iy)
            x = ((ix + 1) * h, (iy + 1) * h)
            a_xm = coeffs.a_matrix((x[0] - 0.5 * h, x[1]), params)[0, 0]
            a_xp = coeffs.a_matrix((x[0] + 0.5 * h, x[1]), params)[0, 0]
            a_ym = coeffs.a_matrix((x[0], x[1] - 0.5 * h), params)[1, 1]
            a_yp = coeffs.a_matrix((x[0], x[1] + 0.5 * h), params)[1, 1]
            bb = coeffs.b_vector(x, params)
            ci = coeffs.c_scalar(x, params)

            add(row, ix, iy, (a_xm + a_xp + a_ym + a_yp) / h**2 + ci)
            add(row, ix - 1, iy, -a_xm / h**2)
            add(row, ix + 1, iy, -a_xp / h**2)
            add(row, ix, iy - 1, -a_ym / h**2)
            add(row, ix, iy + 1, -a_yp / h**2)

            for axis, bv in enumerate(bb):
                dx = (1, 0) if axis == 0 else (0, 1)
                if scheme == "central":
                    add(row, ix + dx[0], iy + dx[1], bv / (2 * h))
                    add(row, ix - dx[0], iy - dx[1], -bv / (2 * h))
                elif bv >= 0:
                    add(row, ix, iy, bv / h)
                    add(row, ix - dx[0], iy - dx[1], -bv / h)
                else:
                    add(row, ix + dx[0], iy + dx[1], bv / h)
                    add(row, ix, iy, -bv / h)

    A = sp.coo_array((data, (rows, cols)), shape=(n * n, n * n)).tocsr()
    A.sort_indices()
    return A * h**2


def _assemble_2d_9pt(grid, coeffs, params):
    n, h = grid.n, grid.h
    rows, cols, data = [], [], []

    def flat(ix, iy):
        return iy * n + ix

    def add(row, ix, iy, v):
        if 0 <= ix < n and 0 <= iy < n:
            rows.append(row)
            cols.append(flat(ix, iy))
            data.append(v)

    for iy in range(n):
        for ix in range(n):
            row = flat(ix, iy)
            x = ((ix + 1) * h, (iy + 1) * h)
            A_loc = coeffs.a_matrix(x, params)
            a11, a12, a22 = A_loc[0, 0], A_loc[0, 1], A_loc[1, 1]
            # effective convection combines b with the tensor divergence
            beff = coeffs.b_vector(x, params) - coeffs.div_a_vector(x, params)
            ci = coeffs.c_scalar(x, params)

            add(row, ix, iy, 2 * (a11 + a22) / h**2 + ci)
            add(row, ix - 1, iy, -a11 / h**2)
            add(row, ix + 1, iy, -a11 / h**2)
            add(row, ix, iy - 1, -a22 / h**2)
            add(row, ix, iy + 1, -a22 / h**2)
            # cross term -2 a12 u_xy on the four corners
            cross = -2 * a12 / (4 * h**2)
            add(row, ix + 1, iy + 1, cross)
            add(row, ix - 1, iy - 1, cross)
            add(row, ix + 1, iy - 1, -cross)
            add(row, ix - 1, iy + 1, -cross)

            for axis, bv in enumerate(beff):
                dx = (1, 0) if axis == 0 else (0, 1)
                add(row, ix + dx[0], iy + dx[1], bv / (2 * h))
                add(row, ix - dx[0], iy - dx[1], -bv / (2 * h))

    A = sp.coo_array((data, (rows, cols)), shape=(n * n, n * n)).tocsr()
    A.sort_indices()
    return A * h**2


# ---------------------------------------------------------------------------
# Dense inverses and anchors
# ---------------------------------------------------------------------------

def dense_inverse(A, cap: int = DENSE_CAP_DEFAULT) -> np.ndarray:
    """Explicit inverse via pivoted LU, verified to ||A A^{-1} - I||_max <= 1e-8."""
    if sp.issparse(A):
        A = A.toarray()
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ConfigurationError(f"matrix must be square, got shape {A.shape}")
    n = A.shape[0]
    if n > cap:
        raise SizeError(f"dense inverse of size {n} exceeds cap {cap}")
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        try:
            lu, piv = scipy.linalg.lu_factor(A)
        except (scipy.linalg.LinAlgWarning, np.linalg.LinAlgError, ValueError) as exc:
            raise FactorizationError(f"LU factorization failed: {exc}") from exc
    inv = scipy.linalg.lu_solve((lu, piv), np.eye(n))
    if not np.all(np.isfinite(inv)):
        raise FactorizationError("inverse contains non-finite entries")
    resid = np.max(np.abs(A @ inv - np.eye(n)))
    if resid > 1e-8:
        raise FactorizationError(f"inverse residual {resid:.3e} exceeds 1e-8")
    return inv


@dataclass(eq=False)
class AnchorSet:
    """Supervised kernel samples (x, y, g) taken from a coarse dense inverse."""

    x: np.ndarray  # (m, dim)
    y: np.ndarray  # (m, dim)
    g: np.ndarray  # (m,)
    m_coarse: int
    param_values: np.ndarray = None  # (m, n_params) or None

    def __len__(self):
        return self.g.shape[0]

    def save_csv(self, path):
        dim = self.x.shape[1]
        header = [f"x{d}" for d in range(dim)] + [f"y{d}" for d in range(dim)] + ["g"]
        if self.param_values is not None:
            header += [f"p{d}" for d in range(self.param_values.shape[1])]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for i in range(len(self)):
                row = list(self.x[i]) + list(self.y[i]) + [self.g[i]]
                if self.param_values is not None:
                    row += list(self.param_values[i])
                w.writerow(row)

    def save_npz(self, path):
        payload = {"x": self.x, "y": self.y, "g": self.g,
                   "m_coarse": np.array(self.m_coarse)}
        if self.param_values is not None:
            payload["param_values"] = self.param_values
        np.savez(path, **payload)

    @classmethod
    def load_npz(cls, path):
        data = np.load(path)
        return cls(
            x=data["x"], y=data["y"], g=data["g"],
            m_coarse=int(data["m_coarse"]),
            param_values=data["param_values"] if "param_values" in data else None,
        )


def generate_anchors(coeffs: CoefficientField, m_coarse: int, params=None,
                     scheme: str = "central",
                     dense_cap: int = DENSE_CAP_DEFAULT) -> AnchorSet:
    """Anchor triples (x_i, x_j, (A^{-1})_{ij}) for all coarse interior pairs.

    ``params`` may be a list of parameter vectors; each contributes one
    anchor block tagged with its values.
    """
    grid = make_grid(coeffs.dim, m_coarse)
    pts = grid.interior_points
    nn = pts.shape[0]
    ii = np.repeat(np.arange(nn), nn)
    jj = np.tile(np.arange(nn), nn)

    def one_block(p):
        A = assemble(grid, coeffs, scheme, params=p)
        G = dense_inverse(A, cap=dense_cap)
        return pts[ii], pts[jj], G[ii, jj]

    if params is None:
        x, y, g = one_block(None)
        return AnchorSet(x=x, y=y, g=g, m_coarse=m_coarse)

    xs, ys, gs, pv = [], [], [], []
    for p in params:
        p = tuple(np.atleast_1d(p))
        x, y, g = one_block(p)
        xs.append(x)
        ys.append(y)
        gs.append(g)
        pv.append(np.tile(np.asarray(p, dtype=float), (x.shape[0], 1)))
    return AnchorSet(
        x=np.concatenate(xs), y=np.concatenate(ys), g=np.concatenate(gs),
        m_coarse=m_coarse, param_values=np.concatenate(pv),
    )
