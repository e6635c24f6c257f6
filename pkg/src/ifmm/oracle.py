"""Dense reference solver and exact matrix-vector products.

The direct solver is verified against a conventional dense LU with full
pivoting, implemented here rather than delegated so the pivoting policy
is exactly the stated baseline. The exact matvec sums kernel entries
blockwise and never materializes the full matrix, so it stays usable at
benchmark sizes where an N x N array would not fit in memory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import PointSet
from .kernels import Kernel


@dataclass
class DenseSystem:
    matrix: np.ndarray
    rhs: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("matrix must be square")
        if len(self.rhs) != m.shape[0]:
            raise ValueError("rhs length mismatch")


class FullPivotLU:
    """LU factorization with full (row and column) pivoting.

    At step k the largest remaining |entry| is brought to the pivot
    position by a row and a column swap; singularity is reported when
    the pivot underflows relative to the first one.
    """

    def __init__(self, A: np.ndarray):
        A = np.array(A, dtype=float)
        n = A.shape[0]
        if A.shape[1] != n:
            raise ValueError("matrix must be square")
        row_perm = np.arange(n)
        col_perm = np.arange(n)
        for k in range(n):
            sub = np.abs(A[k:, k:])
            flat = int(np.argmax(sub))
            i = k + flat // (n - k)
            j = k + flat % (n - k)
            if sub[i - k, j - k] == 0.0:
                raise np.linalg.LinAlgError(f"singular matrix at step {k}")
            if i != k:
                A[[k, i], :] = A[[i, k], :]
                row_perm[[k, i]] = row_perm[[i, k]]
            if j != k:
                A[:, [k, j]] = A[:, [j, k]]
                col_perm[[k, j]] = col_perm[[j, k]]
            if k < n - 1:
                A[k + 1 :, k] /= A[k, k]
                A[k + 1 :, k + 1 :] -= np.outer(A[k + 1 :, k], A[k, k + 1 :])
        self.lu = A
        self.row_perm = row_perm
        self.col_perm = col_perm

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        n = self.lu.shape[0]
        y = b[self.row_perm].copy()
        for k in range(1, n):
            y[k] -= self.lu[k, :k] @ y[:k]
        x = y
        for k in range(n - 1, -1, -1):
            x[k] = (x[k] - self.lu[k, k + 1 :] @ x[k + 1 :]) / self.lu[k, k]
        out = np.empty(n)
        out[self.col_perm] = x
        return out


def dense_solve(sys: DenseSystem) -> np.ndarray:
    return FullPivotLU(sys.matrix).solve(np.asarray(sys.rhs, dtype=float))


def dense_matvec(
    kernel: Kernel, ps: PointSet, x: np.ndarray, block: int = 2048
) -> np.ndarray:
    """Exact A @ x for the identity-plus-kernel system, blockwise.

    Matches assemble_dense(kernel, ps) @ x up to float summation order.
    """
    pts = ps.points
    n = len(pts)
    x = np.asarray(x, dtype=float)
    if x.shape[0] != n:
        raise ValueError("vector length mismatch")
    out = np.empty(n)
    for lo in range(0, n, block):
        hi = min(lo + block, n)
        diff = pts[lo:hi, None, :] - pts[None, :, :]
        A_blk = kernel.evaluate(np.sqrt(np.sum(diff * diff, axis=2)))
        idx = np.arange(lo, hi)
        A_blk[idx - lo, idx] = 1.0
        out[lo:hi] = A_blk @ x
    return out
