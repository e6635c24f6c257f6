"""Radially symmetric kernel functions and dense system assembly.

Each kernel is a total function of the distance r >= 0, finite at r = 0.
The singular kernels carry a regularization radius ``a``: an inner branch
for r < a replaces the singular profile by one that meets the outer
branch continuously (value 1 at r = a), so that self and near-self
entries stay bounded.

The assembled system is identity-plus-kernel: A[i, i] = 1 and
A[i, j] = K(||r_i - r_j||) off the diagonal.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import y0 as bessel_y0

from .geometry import PointSet

DEFAULT_A = 0.001


@dataclass(frozen=True)
class Kernel:
    """A named radial kernel with regularization radius ``a``.

    ``func`` maps an ndarray of distances to values; scalar input is
    accepted through :meth:`evaluate`. Instances are immutable and safe
    to share.
    """

    name: str
    a: float
    func: Callable[[np.ndarray], np.ndarray]

    def evaluate(self, r):
        r = np.asarray(r, dtype=float)
        if np.any(r < 0):
            raise ValueError("negative distance")
        out = self.func(r)
        return float(out) if out.ndim == 0 else out

    def __call__(self, r):
        return self.evaluate(r)


def _branch(r, a, inner, outer):
    """Evaluate inner where 0 < r < a and outer where r >= a.

    Branches only ever see distances in their own domain, so log and
    Bessel terms are never fed 0. Every regularized inner branch here
    vanishes as r -> 0, so r = 0 maps to 0 exactly.
    """
    r = np.atleast_1d(np.asarray(r, dtype=float))
    out = np.zeros_like(r)
    lo = (r < a) & (r > 0)
    hi = r >= a
    if np.any(lo):
        out[lo] = inner(r[lo])
    if np.any(hi):
        out[hi] = outer(r[hi])
    return out


def _make_log(a):
    def func(r):
        return _branch(
            r,
            a,
            lambda s: s * (np.log(s) - 1) / (a * (np.log(a) - 1)),
            lambda s: np.log(s) / np.log(a),
        )

    return func


def _make_laplace3d(a):
    def func(r):
        return _branch(r, a, lambda s: s / a, lambda s: a / s)

    return func


def _make_biharmonic(a):
    def func(r):
        return _branch(
            r,
            a,
            lambda s: s**3 * (3 * np.log(s) - 1) / (a**3 * (3 * np.log(a) - 1)),
            lambda s: s**2 * np.log(s) / (a**2 * np.log(a)),
        )

    return func


def _make_bessel_y0(a):
    def func(r):
        return _branch(
            r,
            a,
            lambda s: (1 + bessel_y0(a)) / (1 + bessel_y0(s)),
            lambda s: bessel_y0(s) / bessel_y0(a),
        )

    return func


def _make_inverse_quadric(a):
    def func(r):
        return _branch(
            r,
            a,
            lambda s: np.arctan(s) / np.arctan(a),
            lambda s: (1 + a**2) / (1 + s**2),
        )

    return func


def _make_inverse_multiquadric(a):
    def func(r):
        return _branch(
            r,
            a,
            lambda s: np.arcsinh(s) / np.arcsinh(a),
            lambda s: np.sqrt((1 + a**2) / (1 + s**2)),
        )

    return func


def _make_helmholtz3d(a):
    def func(r):
        return _branch(
            r, a, lambda s: s / a, lambda s: a * np.cos(s) / (s * np.cos(a))
        )

    return func


def _make_gaussian(a):
    def func(r):
        r = np.atleast_1d(np.asarray(r, dtype=float))
        return np.exp(-(r**2) / a)

    return func


def _make_multiquadric(a):
    def func(r):
        r = np.atleast_1d(np.asarray(r, dtype=float))
        return np.sqrt(1 + r**2 / a**2)

    return func


_BUILDERS = {
    "log": _make_log,
    "laplace3d": _make_laplace3d,
    "biharmonic": _make_biharmonic,
    "bessel-y0": _make_bessel_y0,
    "inverse-quadric": _make_inverse_quadric,
    "inverse-multiquadric": _make_inverse_multiquadric,
    "helmholtz3d": _make_helmholtz3d,
    "gaussian": _make_gaussian,
    "multiquadric": _make_multiquadric,
}

# Smooth kernels have no regularization branch; the rest meet value 1 at r = a.
SMOOTH_KERNELS = ("gaussian", "multiquadric")
KERNEL_NAMES = tuple(_BUILDERS)


def make_kernel(name: str, a: float = DEFAULT_A) -> Kernel:
    if name not in _BUILDERS:
        raise ValueError(f"unknown kernel {name!r}; choose from {KERNEL_NAMES}")
    if a <= 0:
        raise ValueError("regularization radius a must be positive")
    return Kernel(name=name, a=a, func=_BUILDERS[name](a))


def evaluate(kernel: Kernel, r):
    return kernel.evaluate(r)


def kernel_block(kernel: Kernel, targets: np.ndarray, sources: np.ndarray) -> np.ndarray:
    """Dense kernel evaluation K(||t_i - s_j||) between two coordinate sets."""
    targets = np.atleast_2d(targets)
    sources = np.atleast_2d(sources)
    diff = targets[:, None, :] - sources[None, :, :]
    return kernel.evaluate(np.sqrt(np.sum(diff * diff, axis=2)))


def assemble_dense(kernel: Kernel, ps: PointSet, cap: int = 20000) -> np.ndarray:
    """Materialize the identity-plus-kernel system matrix.

    Guarded by ``cap`` since this is the O(N^2)-memory reference path.
    """
    n = len(ps)
    if n > cap:
        raise ValueError(f"refusing dense assembly at N={n} > cap={cap}")
    A = kernel_block(kernel, ps.points, ps.points)
    np.fill_diagonal(A, 1.0)
    return A
