"""Compression of a bivariate kernel into preconditioner operators.

A kernel callback over a point set is turned into either a sparse
approximate inverse (when an off-diagonal decay diagnostic says the kernel
is effectively local) or a hierarchical matrix built from a 2^d cluster
tree, with admissible blocks factored by Nystrom cross approximation.
Construction touches only sampled kernel entries, never the full dense
matrix, except for the explicitly dense leaf blocks.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.spatial.distance import cdist

from .errors import ConfigurationError, MemoryBudgetError

SPARSE = "sparse"
HMATRIX = "hmatrix"

BYTES_PER_SCALAR = 8


# ---------------------------------------------------------------------------
# Kernel sources
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class KernelSource:
    """Deterministic entry oracle G(x_i, x_j) over a fixed point set.

    ``entry_block(rows, cols)`` returns the dense cross block; ``entry_pairs``
    evaluates zipped index pairs.  Row indices select the field point x,
    column indices the source point y.
    """

    points: np.ndarray           # (n, d)
    entry_block: callable
    entry_pairs: callable
    params: tuple = None

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def entry(self, i: int, j: int) -> float:
        return float(self.entry_pairs(np.array([i]), np.array([j]))[0])


def kernel_from_dense(G, points) -> KernelSource:
    G = np.asarray(G, dtype=float)
    points = np.asarray(points, dtype=float)
    if G.shape != (points.shape[0], points.shape[0]):
        raise ConfigurationError("dense kernel shape does not match the point set")
    return KernelSource(
        points=points,
        entry_block=lambda rows, cols: G[np.ix_(np.asarray(rows), np.asarray(cols))],
        entry_pairs=lambda ii, jj: G[np.asarray(ii), np.asarray(jj)],
    )


def kernel_from_function(fn, points) -> KernelSource:
    """Wrap a vectorized callback fn(X, Y) over paired coordinate rows."""
    points = np.asarray(points, dtype=float)

    def block(rows, cols):
        rows = np.asarray(rows)
        cols = np.asarray(cols)
        X = np.repeat(points[rows], len(cols), axis=0)
        Y = np.tile(points[cols], (len(rows), 1))
        return np.asarray(fn(X, Y)).reshape(len(rows), len(cols))

    def pairs(ii, jj):
        return np.asarray(fn(points[np.asarray(ii)], points[np.asarray(jj)]))

    return KernelSource(points=points, entry_block=block, entry_pairs=pairs)


def kernel_from_model(model, points, params=None) -> KernelSource:
    """Kernel entries evaluated by a trained multiscale model.

    ``params`` freezes the problem parameters (e.g. one angle) for every
    entry of this source.
    """
    from . import msnn

    points = np.asarray(points, dtype=float)
    frozen = None if params is None else tuple(np.atleast_1d(params))

    def fn(X, Y):
        p = None if frozen is None else np.tile(frozen, (X.shape[0], 1))
        return msnn.eval_batch(model, X, Y, params=p)

    src = kernel_from_function(fn, points)
    src.params = frozen
    return src


# ---------------------------------------------------------------------------
# Decay diagnostic and format choice
# ---------------------------------------------------------------------------

def decay_ratio(kernel: KernelSource, r: float, row_chunk: int = 256) -> np.ndarray:
    """Per-row maximum |G(x_i, x_j)| over all x_j farther than r from x_i."""
    if r <= 0:
        raise ConfigurationError("decay radius must be positive")
    n = kernel.n
    rho = np.zeros(n)
    for lo in range(0, n, row_chunk):
        hi = min(lo + row_chunk, n)
        rows = np.arange(lo, hi)
        block = np.abs(kernel.entry_block(rows, np.arange(n)))
        far = cdist(kernel.points[rows], kernel.points) > r
        block = np.where(far, block, 0.0)
        rho[lo:hi] = np.where(far.any(axis=1), block.max(axis=1), 0.0)
    return rho


def choose_format(rho, tau_loc: float, mem_sparse: int, mem_hmatrix: int,
                  m_max: int) -> str:
    """Locality first, then the memory budget.

    Sparse iff every row ratio is below tau_loc; the preferred format must
    fit within m_max bytes, falling back to the other when only that one
    fits.
    """
    preferred = SPARSE if np.max(rho) < tau_loc else HMATRIX
    other = HMATRIX if preferred == SPARSE else SPARSE
    mem = {SPARSE: mem_sparse, HMATRIX: mem_hmatrix}
    if mem[preferred] <= m_max:
        return preferred
    if mem[other] <= m_max:
        return other
    raise MemoryBudgetError(
        f"both formats exceed the budget: sparse {mem_sparse} B, "
        f"hmatrix {mem_hmatrix} B, budget {m_max} B")


# ---------------------------------------------------------------------------
# Sparse approximate inverse
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class SparseApproxInverse:
    """Row-sparse kernel truncation: per row the p largest nearby entries."""

    matrix: sp.csr_array
    radius: float
    per_row: int

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def matvec(self, v):
        return self.matrix @ v

    @property
    def nbytes(self) -> int:
        return int(self.matrix.nnz) * 2 * BYTES_PER_SCALAR


def build_sparse(kernel: KernelSource, r: float, p: int) -> SparseApproxInverse:
    """Keep the p largest-magnitude entries within radius r of each row point.

    Ties are broken toward the smaller column index.
    """
    if p < 1:
        raise ConfigurationError("p must be >= 1")
    n = kernel.n
    rows, cols, vals = [], [], []
    all_cols = np.arange(n)
    for i in range(n):
        near = all_cols[cdist(kernel.points[i : i + 1], kernel.points)[0] <= r]
        if near.size == 0:
            continue
        entries = kernel.entry_block(np.array([i]), near)[0]
        order = np.lexsort((near, -np.abs(entries)))
        keep = order[: min(p, near.size)]
        rows.extend([i] * keep.size)
        cols.extend(near[keep])
        vals.extend(entries[keep])
    M = sp.coo_array((vals, (rows, cols)), shape=(n, n)).tocsr()
    M.sort_indices()
    return SparseApproxInverse(matrix=M, radius=r, per_row=p)


def estimate_sparse_bytes(n: int, p: int) -> int:
    return n * p * 2 * BYTES_PER_SCALAR


# ---------------------------------------------------------------------------
# Cluster tree
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class ClusterNode:
    start: int
    stop: int
    box_min: np.ndarray
    box_max: np.ndarray
    children: tuple = ()

    @property
    def size(self) -> int:
        return self.stop - self.start

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.box_min + self.box_max)

    @property
    def diameter(self) -> float:
        return float(np.linalg.norm(self.box_max - self.box_min))


@dataclass(eq=False)
class ClusterTree:
    root: ClusterNode
    perm: np.ndarray       # permuted position -> original index
    inv_perm: np.ndarray
    leaf_max: int
    points: np.ndarray     # original ordering

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def leaves(self):
        out = []

        def rec(node):
            if node.is_leaf:
                out.append(node)
            else:
                for c in node.children:
                    rec(c)

        rec(self.root)
        return out


def build_cluster_tree(points, leaf_max) -> ClusterTree:
    """Recursive geometric bisection per axis (2^d children per split).

    Point order within leaves is stable with respect to the input order.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points.reshape(-1, 1)
    if points.shape[0] == 0:
        raise ConfigurationError("cannot build a cluster tree over zero points")
    leaf_cap = max(1, int(math.floor(leaf_max)))
    dim = points.shape[1]
    perm_parts = []

    def rec(idx, offset):
        pts = points[idx]
        box_min = pts.min(axis=0)
        box_max = pts.max(axis=0)
        if idx.size <= leaf_cap:
            perm_parts.append(idx)
            return ClusterNode(offset, offset + idx.size, box_min, box_max)
        mid = 0.5 * (box_min + box_max)
        codes = np.zeros(idx.size, dtype=int)
        for d in range(dim):
            codes += (pts[:, d] >= mid[d]).astype(int) << d
        buckets = [idx[codes == c] for c in range(2**dim)]
        buckets = [b for b in buckets if b.size > 0]
        if len(buckets) <= 1:
            # degenerate cloud (coincident points): stop splitting
            perm_parts.append(idx)
            return ClusterNode(offset, offset + idx.size, box_min, box_max)
        children = []
        pos = offset
        for b in buckets:
            child = rec(b, pos)
            pos = child.stop
            children.append(child)
        return ClusterNode(offset, pos, box_min, box_max, tuple(children))

    root = rec(np.arange(points.shape[0]), 0)
    perm = np.concatenate(perm_parts)
    inv_perm = np.empty_like(perm)
    inv_perm[perm] = np.arange(perm.size)
    return ClusterTree(root=root, perm=perm, inv_perm=inv_perm,
                       leaf_max=leaf_cap, points=points)


def admissible(node_a: ClusterNode, node_b: ClusterNode, eta: float) -> bool:
    """max(diam_a, diam_b) <= eta * (distance between box centers)."""
    dist = float(np.linalg.norm(node_a.center - node_b.center))
    if dist == 0.0:
        return False
    return max(node_a.diameter, node_b.diameter) <= eta * dist


# ---------------------------------------------------------------------------
# Low-rank blocks
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class LowRank:
    U: np.ndarray  # (n_r, k)
    V: np.ndarray  # (n_c, k); block ~ U @ V.T

    @property
    def rank(self) -> int:
        return self.U.shape[1]


def _nearest_pivots(pts, target_center, q):
    """q indices spread evenly over the half of pts nearest to target_center."""
    order = np.argsort(np.linalg.norm(pts - target_center, axis=1), kind="stable")
    pool = order[: max(q, (len(order) + 1) // 2)]
    take = np.round(np.linspace(0, pool.size - 1, q)).astype(int)
    return np.sort(pool[take])


def lowrank_block(kernel: KernelSource, rows, cols, k: int,
                  method: str = "nystrom_nearest", sample_rank: int = None,
                  rng=None, rcond: float = 1e-10):
    """Cross/Nystrom factorization truncated to rank k.

    Pivots come either from the points nearest the opposite cluster
    (``nystrom_nearest``) or uniformly at random with 2k oversampling
    (``nystrom_random_oversampled``); the q x q core is inverted by a
    pseudoinverse with relative cutoff ``rcond``.  Returns a LowRank pair or
    a dense fallback array when the pivots are degenerate beyond repair.
    """
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    if k < 1:
        raise ConfigurationError("target rank must be >= 1")
    if method not in ("nystrom_nearest", "nystrom_random_oversampled"):
        raise ConfigurationError(f"unknown low-rank method {method!r}")
    q = sample_rank if sample_rank is not None else (
        k if method == "nystrom_nearest" else 2 * k)
    q = int(min(max(q, k), rows.size, cols.size))
    k = min(k, q)
    rng = np.random.default_rng(0) if rng is None else rng

    rpts = kernel.points[rows]
    cpts = kernel.points[cols]

    def draw(randomized):
        if randomized:
            pr = np.sort(rng.choice(rows.size, size=q, replace=False))
            pc = np.sort(rng.choice(cols.size, size=q, replace=False))
        else:
            c_center = 0.5 * (cpts.min(axis=0) + cpts.max(axis=0))
            r_center = 0.5 * (rpts.min(axis=0) + rpts.max(axis=0))
            pr = _nearest_pivots(rpts, c_center, q)
            pc = _nearest_pivots(cpts, r_center, q)
        return pr, pc

    attempts = [method == "nystrom_random_oversampled",
                True]  # redraw randomly once on degeneracy
    if method == "nystrom_nearest":
        attempts[0] = False

    for attempt, randomized in enumerate(attempts):
        pr, pc = draw(randomized)
        C = kernel.entry_block(rows, cols[pc])           # (n_r, q)
        R = kernel.entry_block(rows[pr], cols)           # (q, n_c)
        core = R[:, pc]
        u, s, vt = np.linalg.svd(core)
        if s.size == 0 or s[0] == 0.0:
            if not np.any(C) and not np.any(R):
                return LowRank(U=np.zeros((rows.size, 1)), V=np.zeros((cols.size, 1)))
            continue
        keep = s > rcond * s[0]
        pinv = (vt[keep].T / s[keep]) @ u[:, keep].T
        U0 = C @ pinv                                    # (n_r, q)
        return _truncate(U0, R.T, k)

    return kernel.entry_block(rows, cols)  # dense fallback


def _truncate(U0, V0, k):
    """SVD-truncate the product U0 @ V0.T to rank k."""
    Qu, Ru = np.linalg.qr(U0)
    Qv, Rv = np.linalg.qr(V0)
    us, ss, vts = np.linalg.svd(Ru @ Rv.T)
    r = int(min(k, np.count_nonzero(ss > 0)))
    r = max(r, 1)
    U = Qu @ (us[:, :r] * ss[:r])
    V = Qv @ vts[:r].T
    return LowRank(U=U, V=V)


# ---------------------------------------------------------------------------
# H-matrix
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RankRule:
    """Per-block target ranks for admissible blocks.

    ``nystrom_nearest`` / ``nystrom_random_oversampled`` sample at
    ``sample_rank`` (defaults: the target itself / twice the target) and
    truncate to the target.  ``svd_adaptive`` forms the block densely and
    keeps the smallest rank with entrywise error <= tol * max|block|.
    With ``log_scale`` the base rank is multiplied by
    max(1, log(n_b)/log(leaf_size)) where n_b = min(rows, cols).
    """

    method: str = "nystrom_nearest"
    base_rank: int = 1
    sample_rank: int = None
    log_scale: bool = False
    leaf_size: int = None
    tol: float = 1e-3

    def target_rank(self, n_b: int) -> int:
        k = self.base_rank
        if self.log_scale:
            if not self.leaf_size or self.leaf_size <= 1:
                raise ConfigurationError("log-scaled ranks need leaf_size > 1")
            k = round(self.base_rank * max(1.0, math.log(n_b) / math.log(self.leaf_size)))
        return max(int(k), 1)


@dataclass(eq=False)
class HBlock:
    r0: int
    r1: int
    c0: int
    c1: int
    dense: np.ndarray = None
    low: LowRank = None

    @property
    def is_dense(self) -> bool:
        return self.dense is not None

    @property
    def stored_scalars(self) -> int:
        if self.is_dense:
            return self.dense.size
        return self.low.U.size + self.low.V.size


@dataclass(eq=False)
class HMatrix:
    """Blocks tiling the permuted index square exactly once."""

    n: int
    tree: ClusterTree
    blocks: list
    eta: float
    rank_rule: RankRule

    @property
    def stored_scalars(self) -> int:
        return sum(b.stored_scalars for b in self.blocks)

    @property
    def nbytes(self) -> int:
        return self.stored_scalars * BYTES_PER_SCALAR

    @property
    def dense_nbytes(self) -> int:
        return self.n * self.n * BYTES_PER_SCALAR

    @property
    def compression_ratio(self) -> float:
        return self.dense_nbytes / self.nbytes

    def matvec(self, v):
        return hmatvec(self, v)

    def entry(self, i: int, j: int) -> float:
        ip = int(self.tree.inv_perm[i])
        jp = int(self.tree.inv_perm[j])
        for b in self.blocks:
            if b.r0 <= ip < b.r1 and b.c0 <= jp < b.c1:
                if b.is_dense:
                    return float(b.dense[ip - b.r0, jp - b.c0])
                return float(b.low.U[ip - b.r0] @ b.low.V[jp - b.c0])
        raise ConfigurationError(f"no block covers entry ({i}, {j})")

    def stats(self) -> dict:
        hist = {}
        n_dense = 0
        for b in self.blocks:
            if b.is_dense:
                n_dense += 1
            else:
                hist[b.low.rank] = hist.get(b.low.rank, 0) + 1
        return {
            "n": self.n,
            "blocks_total": len(self.blocks),
            "blocks_dense": n_dense,
            "blocks_lowrank": len(self.blocks) - n_dense,
            "rank_histogram": {str(k): v for k, v in sorted(hist.items())},
            "stored_scalars": self.stored_scalars,
            "memory_bytes": self.nbytes,
            "dense_bytes": self.dense_nbytes,
            "compression_ratio": self.compression_ratio,
            "eta": self.eta,
            "leaf_max": self.tree.leaf_max,
        }

    def block_structure(self) -> list:
        return [
            {"r0": b.r0, "r1": b.r1, "c0": b.c0, "c1": b.c1,
             "kind": "dense" if b.is_dense else "lowrank",
             "rank": None if b.is_dense else b.low.rank}
            for b in self.blocks
        ]


def _adaptive_block(kernel, rows, cols, tol):
    B = kernel.entry_block(rows, cols)
    scale = np.max(np.abs(B))
    if scale == 0.0:
        return LowRank(U=np.zeros((rows.size, 1)), V=np.zeros((cols.size, 1)))
    u, s, vt = np.linalg.svd(B, full_matrices=False)
    for r in range(1, s.size + 1):
        approx = (u[:, :r] * s[:r]) @ vt[:r]
        if np.max(np.abs(B - approx)) <= tol * scale:
            return LowRank(U=u[:, :r] * s[:r], V=vt[:r].T)
    return B  # no compression possible within tolerance


def build_hmatrix(kernel: KernelSource, tree: ClusterTree, eta: float,
                  rank_rule: RankRule, m_max: int = None, rng=None) -> HMatrix:
    """Assemble the block partition and factor the admissible blocks.

    Raises MemoryBudgetError (carrying partial statistics) as soon as the
    accumulated storage would exceed ``m_max`` bytes.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    blocks = []
    scalars = 0

    def account(block):
        nonlocal scalars
        blocks.append(block)
        scalars += block.stored_scalars
        if m_max is not None and scalars * BYTES_PER_SCALAR > m_max:
            partial = {
                "blocks_built": len(blocks),
                "stored_scalars": scalars,
                "memory_bytes": scalars * BYTES_PER_SCALAR,
                "budget_bytes": m_max,
            }
            raise MemoryBudgetError(
                f"H-matrix exceeds the {m_max} byte budget after "
                f"{len(blocks)} blocks", stats=partial)

    def rec(a: ClusterNode, b: ClusterNode):
        rows = tree.perm[a.start : a.stop]
        cols = tree.perm[b.start : b.stop]
        if admissible(a, b, eta):
            n_b = min(a.size, b.size)
            if rank_rule.method == "svd_adaptive":
                payload = _adaptive_block(kernel, rows, cols, rank_rule.tol)
            else:
                k = rank_rule.target_rank(n_b)
                payload = lowrank_block(
                    kernel, rows, cols, k, method=rank_rule.method,
                    sample_rank=rank_rule.sample_rank, rng=rng)
            if isinstance(payload, LowRank):
                account(HBlock(a.start, a.stop, b.start, b.stop, low=payload))
            else:
                account(HBlock(a.start, a.stop, b.start, b.stop, dense=payload))
            return
        if a.is_leaf and b.is_leaf:
            account(HBlock(a.start, a.stop, b.start, b.stop,
                           dense=kernel.entry_block(rows, cols)))
            return
        for ca in (a.children if not a.is_leaf else (a,)):
            for cb in (b.children if not b.is_leaf else (b,)):
                rec(ca, cb)

    rec(tree.root, tree.root)
    return HMatrix(n=tree.n, tree=tree, blocks=blocks, eta=eta, rank_rule=rank_rule)


def estimate_hmatrix_bytes(tree: ClusterTree, eta: float, rank_rule: RankRule) -> int:
    """Predicted storage of the block partition without touching the kernel."""
    total = 0

    def rec(a, b):
        nonlocal total
        if admissible(a, b, eta):
            if rank_rule.method == "svd_adaptive":
                k = rank_rule.base_rank
            else:
                k = rank_rule.target_rank(min(a.size, b.size))
            total += k * (a.size + b.size)
            return
        if a.is_leaf and b.is_leaf:
            total += a.size * b.size
            return
        for ca in (a.children if not a.is_leaf else (a,)):
            for cb in (b.children if not b.is_leaf else (b,)):
                rec(ca, cb)

    rec(tree.root, tree.root)
    return total * BYTES_PER_SCALAR


def hmatvec(H: HMatrix, v):
    """Exact sum of block contributions; O(stored scalars) work."""
    v = np.asarray(v, dtype=float)
    if v.shape[0] != H.n:
        raise ConfigurationError(f"vector length {v.shape[0]} != {H.n}")
    vp = v[H.tree.perm]
    out = np.zeros(H.n)
    for b in H.blocks:
        seg = vp[b.c0 : b.c1]
        if b.is_dense:
            out[b.r0 : b.r1] += b.dense @ seg
        else:
            out[b.r0 : b.r1] += b.low.U @ (b.low.V.T @ seg)
    res = np.empty(H.n)
    res[H.tree.perm] = out
    return res


def validate_hmatrix(H: HMatrix, kernel: KernelSource, s: int = 1000,
                     tau: float = 0.1, rng=None):
    """Mean relative entrywise error over s uniformly sampled index pairs.

    Returns (eps_h, accepted) with accepted = eps_h <= tau; the relative
    error uses an absolute floor of 1e-12 in the denominator.
    """
    if s < 1:
        raise ConfigurationError("sample count must be >= 1")
    rng = np.random.default_rng(0) if rng is None else rng
    ii = rng.integers(0, H.n, size=s)
    jj = rng.integers(0, H.n, size=s)
    exact = kernel.entry_pairs(ii, jj)
    approx = np.array([H.entry(int(i), int(j)) for i, j in zip(ii, jj)])
    rel = np.abs(approx - exact) / np.maximum(np.abs(exact), 1e-12)
    eps_h = float(np.mean(rel))
    return eps_h, eps_h <= tau


def save_stats_json(H: HMatrix, path, eps_h: float = None,
                    include_blocks: bool = False):
    stats = H.stats()
    if eps_h is not None:
        stats["eps_h"] = eps_h
    if include_blocks:
        stats["blocks"] = H.block_structure()
    with open(path, "w") as fh:
        json.dump(stats, fh, indent=2)
