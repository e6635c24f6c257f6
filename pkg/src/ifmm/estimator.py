"""Estimator-style front end: configure, fit on points, solve systems.

``IfmmSolver`` wraps the functional pipeline (point validation, tree
build, operator construction, factorization) behind the familiar
fit/solve shape so it composes with scikit-learn style tooling:
parameters are constructor arguments retrievable via ``get_params``,
``fit`` consumes an (n_samples, dim) array, and fitted state lives in
trailing-underscore attributes.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .geometry import PointSet, build_tree, compute_lists
from .kernels import make_kernel
from .operators import fmm_matvec, init_operators
from .solver import factorize, solve


def default_depth(n: int, dim: int, leaf_target: int = 100) -> int:
    """Tree depth aiming at roughly ``leaf_target`` points per leaf."""
    cells = max(n / leaf_target, 1.0)
    return max(2, int(np.ceil(np.log(cells) / np.log(2.0**dim))))


def validate_points(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"expected a 2d array of points, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("points must be finite")
    return X


class IfmmSolver(BaseEstimator):
    """Direct solver for the system  x_i + sum_j K(||r_i - r_j||) x_j = b_i.

    Parameters
    ----------
    kernel : str
        Registered kernel id (see ``ifmm.KERNEL_NAMES``).
    a : float
        Regularization radius of the kernel.
    tol : float
        Compression tolerance for far-field construction and fill-in
        compression; 0 disables truncation (exact mode, small N only).
    p : int
        Chebyshev order per dimension for the far-field bases.
    depth : int or None
        Tree depth; None picks one from the point count.

    After ``fit(X)`` the factorization is reusable for any number of
    right-hand sides via ``solve(b)``.
    """

    def __init__(
        self,
        kernel: str = "log",
        a: float = 0.001,
        tol: float = 1e-14,
        p: int = 8,
        depth: int | None = None,
    ):
        self.kernel = kernel
        self.a = a
        self.tol = tol
        self.p = p
        self.depth = depth

    def fit(self, X, y=None):
        X = validate_points(X)
        kernel = make_kernel(self.kernel, a=self.a)
        depth = self.depth or default_depth(len(X), X.shape[1])
        ps = PointSet(dim=X.shape[1], points=X)
        tree = compute_lists(build_tree(ps, depth))
        store = init_operators(tree, kernel, p=self.p, tol=self.tol)
        self.kernel_ = kernel
        self.tree_ = tree
        self._matvec_store = None
        self.factorization_ = factorize(store, tree, tol=self.tol)
        self.r_m_ = self.factorization_.r_m
        self.n_features_in_ = X.shape[1]
        return self

    def solve(self, b) -> np.ndarray:
        self._check_fitted()
        return solve(self.factorization_, np.asarray(b, dtype=float))

    def matvec(self, x) -> np.ndarray:
        """Apply the compressed forward operator (for residual checks)."""
        self._check_fitted()
        if self._matvec_store is None:
            # the factorization consumed its store, so the forward
            # operator needs a fresh one
            self._matvec_store = init_operators(
                self.tree_, self.kernel_, p=self.p, tol=self.tol
            )
        return fmm_matvec(self._matvec_store, self.tree_, np.asarray(x, dtype=float))

    def _check_fitted(self):
        if not hasattr(self, "factorization_"):
            raise RuntimeError("IfmmSolver is not fitted; call fit(points) first")
