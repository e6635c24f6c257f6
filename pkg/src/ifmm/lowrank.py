"""Low-rank machinery: Chebyshev interpolation, SVD truncation, ACA.

Three tools used throughout the solver:

- tensor-product Chebyshev interpolation bases that factorize kernel
  blocks between well-separated boxes,
- SVD truncation with the sigma_{r+1}/sigma_1 < tol rank rule,
- partially pivoted adaptive cross approximation for blocks that are
  only available entrywise (the elimination fill-ins), followed by a
  QR+SVD recompression that restores near-optimal ranks.

All tolerances are relative Frobenius unless noted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr, svd

from .kernels import Kernel, kernel_block


@dataclass
class LowRank:
    """A factorization ``left @ right.T`` certified at relative tol.

    ``incompressible`` marks an ACA run that hit full rank without its
    stopping criterion firing; the factorization is still exact in that
    case, the flag only signals that no compression was achieved.
    """

    left: np.ndarray
    right: np.ndarray
    tol: float
    incompressible: bool = False

    @property
    def rank(self) -> int:
        return self.left.shape[1]

    def materialize(self) -> np.ndarray:
        return self.left @ self.right.T


@dataclass
class ChebBasis:
    """Tensor-grid Chebyshev nodes in a box plus the point interpolation matrix."""

    order_per_dim: int
    nodes: np.ndarray  # (p^d, d), inside the box
    interp: np.ndarray  # (n_points, p^d)


def cheb_nodes_1d(p: int) -> np.ndarray:
    """First-kind Chebyshev nodes on [-1, 1], ascending."""
    return -np.cos((2 * np.arange(p) + 1) * np.pi / (2 * p))


def lagrange_eval(x: np.ndarray, nodes: np.ndarray) -> np.ndarray:
    """Cardinal Lagrange functions of ``nodes`` evaluated at ``x``.

    Direct product form; p stays small (<= 16) so stability is not a
    concern, and exact node hits come out exactly as unit vectors.
    """
    x = np.asarray(x, dtype=float)
    p = len(nodes)
    L = np.ones((len(x), p))
    for j in range(p):
        for m in range(p):
            if m != j:
                L[:, j] *= (x - nodes[m]) / (nodes[j] - nodes[m])
    return L


def tensor_nodes(center: np.ndarray, half_width: float, p: int, dim: int) -> np.ndarray:
    """p^d tensor grid of first-kind nodes scaled into the box."""
    n1 = cheb_nodes_1d(p)
    grids = np.meshgrid(*([n1] * dim), indexing="ij")
    g = np.stack([a.ravel() for a in grids], axis=1)
    return np.asarray(center) + half_width * g


def tensor_interp(
    points: np.ndarray, center: np.ndarray, half_width: float, p: int
) -> np.ndarray:
    """Interpolation matrix from the box's tensor nodes to the points.

    Column ordering matches :func:`tensor_nodes` (first coordinate
    slowest).
    """
    points = np.atleast_2d(points)
    dim = points.shape[1]
    n1 = cheb_nodes_1d(p)
    per_dim = [
        lagrange_eval((points[:, d] - center[d]) / half_width, n1) for d in range(dim)
    ]
    out = per_dim[0]
    for d in range(1, dim):
        out = (out[:, :, None] * per_dim[d][:, None, :]).reshape(len(points), -1)
    return out


def cheb_basis(cluster, points, p: int) -> ChebBasis:
    """Chebyshev basis for a leaf cluster over its own points.

    ``points`` may be the full Morton-permuted array (the cluster's
    ``point_range`` selects its slice) or exactly the cluster's slice.
    """
    if p < 2:
        raise ValueError("Chebyshev order must be >= 2")
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if cluster.point_range is not None:
        lo, hi = cluster.point_range
        if len(pts) != hi - lo:
            pts = pts[lo:hi]
    if len(pts) == 0:
        raise ValueError(f"empty cluster {cluster.index} at level {cluster.level}")
    dim = pts.shape[1]
    return ChebBasis(
        order_per_dim=p,
        nodes=tensor_nodes(cluster.center, cluster.half_width, p, dim),
        interp=tensor_interp(pts, cluster.center, cluster.half_width, p),
    )


def m2l_kernel_block(kernel: Kernel, src: ChebBasis, dst: ChebBasis) -> np.ndarray:
    """Kernel evaluated dst-nodes x src-nodes; boxes must not overlap."""
    lo_d, hi_d = dst.nodes.min(axis=0), dst.nodes.max(axis=0)
    lo_s, hi_s = src.nodes.min(axis=0), src.nodes.max(axis=0)
    if np.all(hi_d >= lo_s) and np.all(hi_s >= lo_d):
        raise ValueError("source and target boxes overlap")
    return kernel_block(kernel, dst.nodes, src.nodes)


def rank_from_singular_values(s: np.ndarray, tol: float) -> int:
    """Smallest r with s[r]/s[0] < tol; full rank when no index qualifies."""
    if len(s) == 0 or s[0] == 0.0:
        return 0
    if tol <= 0.0:
        return len(s)
    below = np.nonzero(s / s[0] < tol)[0]
    return int(below[0]) if len(below) else len(s)


def svd_truncate(block: np.ndarray, tol: float) -> LowRank:
    """Truncated SVD with the sigma_{r+1}/sigma_1 < tol rule.

    Singular values are absorbed into the left factor.
    """
    block = np.asarray(block, dtype=float)
    if block.size == 0:
        return LowRank(
            left=np.zeros((block.shape[0], 0)),
            right=np.zeros((block.shape[1], 0)),
            tol=tol,
        )
    U, s, Vt = svd(block, full_matrices=False, lapack_driver="gesdd")
    r = rank_from_singular_values(s, tol)
    return LowRank(left=U[:, :r] * s[:r], right=Vt[:r].T, tol=tol)


def recompress(left: np.ndarray, right: np.ndarray, tol: float) -> LowRank:
    """QR both factors, SVD the small core, re-truncate at tol."""
    if left.shape[1] == 0:
        return LowRank(left=left, right=right, tol=tol)
    Ql, Rl = qr(left, mode="economic")
    Qr, Rr = qr(right, mode="economic")
    core = svd_truncate(Rl @ Rr.T, tol)
    return LowRank(left=Ql @ core.left, right=Qr @ core.right, tol=tol)


def aca(row_sampler, col_sampler, shape, tol: float, max_rank: int | None = None) -> LowRank:
    """Partially pivoted adaptive cross approximation.

    ``row_sampler(i)`` / ``col_sampler(j)`` return exact rows/columns of
    the implicit block. Pivoting starts from the largest-magnitude row
    among a small random probe set, then follows standard partial
    pivoting on residual rows/columns. Stops when the last cross update
    satisfies ||u|| * ||v|| <= tol * ||A||_F (running estimate), with a
    three-strike rule on near-zero pivots before declaring the remainder
    zero. The raw crosses are recompressed through QR+SVD at the same
    tolerance.

    Hitting min(m, n) crosses without the criterion firing returns the
    full factorization flagged ``incompressible``.
    """
    m, n = shape
    full = min(m, n)
    if max_rank is None:
        max_rank = full
    if m == 0 or n == 0:
        return LowRank(left=np.zeros((m, 0)), right=np.zeros((n, 0)), tol=tol)

    rng = np.random.default_rng(0)
    probes = rng.choice(m, size=min(10, m), replace=False)
    probe_rows = {int(i): np.asarray(row_sampler(int(i)), dtype=float) for i in probes}
    next_row = max(probe_rows, key=lambda i: np.abs(probe_rows[i]).max(initial=0.0))

    us, vs = [], []
    used_rows, used_cols = set(), set()
    norm_sq = 0.0
    strikes = 0
    converged = False

    while len(us) < min(full, max_rank):
        i = next_row
        used_rows.add(i)
        row = probe_rows.get(i)
        if row is None:
            row = np.asarray(row_sampler(i), dtype=float)
        res_row = row.copy()
        for u, v in zip(us, vs):
            res_row -= u[i] * v
        if used_cols:
            res_row[list(used_cols)] = 0.0
        j = int(np.argmax(np.abs(res_row)))
        pivot = res_row[j]
        tiny = 1e-15 * np.sqrt(norm_sq) if norm_sq > 0 else 1e-300
        if abs(pivot) <= tiny:
            strikes += 1
            if strikes >= 3 or len(used_rows) >= m:
                converged = True
                break
            remaining = [r for r in range(m) if r not in used_rows]
            next_row = int(rng.choice(remaining))
            continue
        strikes = 0
        used_cols.add(j)
        col = np.asarray(col_sampler(j), dtype=float)
        res_col = col.copy()
        for u, v in zip(us, vs):
            res_col -= v[j] * u
        u = res_col / pivot
        v = res_row
        cross_sq = float(np.dot(u, u) * np.dot(v, v))
        if us:
            norm_sq += cross_sq + 2.0 * float(
                np.abs(np.array([np.dot(u, uu) for uu in us]))
                @ np.abs(np.array([np.dot(v, vv) for vv in vs]))
            )
        else:
            norm_sq = cross_sq
        us.append(u)
        vs.append(v)
        if tol > 0 and cross_sq <= tol**2 * norm_sq:
            converged = True
            break
        u_abs = np.abs(u)
        u_abs[list(used_rows)] = -1.0
        next_row = int(np.argmax(u_abs))
        if u_abs[next_row] < 0:
            converged = True
            break

    if not us:
        return LowRank(left=np.zeros((m, 0)), right=np.zeros((n, 0)), tol=tol)
    left = np.stack(us, axis=1)
    right = np.stack(vs, axis=1)
    out = recompress(left, right, tol)
    out.incompressible = not converged and len(us) >= full and tol > 0
    return out


def aca_dense(block: np.ndarray, tol: float) -> LowRank:
    """ACA over an already materialized block (samplers index into it)."""
    block = np.asarray(block, dtype=float)
    return aca(
        lambda i: block[i, :], lambda j: block[:, j], block.shape, tol
    )
