"""Operator store: near-field blocks, nested far-field bases, transfers.

The store holds, per level k and cluster i:

- ``l2p[(k, i)]``: the interpolation basis U_i with orthonormal columns.
  Its transpose is the charge-lumping operator (symmetric kernels), so
  local and multipole dimensions coincide. For a non-leaf cluster the
  particle axis is the concatenation of the children's multipole axes
  and U_i plays the role of the stacked child transfer operators.
- ``p2p[(k, i, j)]``: dense particle-particle coupling. At the leaf
  level these are kernel blocks over neighbor pairs (unit diagonal on
  the self block); at upper levels they are assembled from child
  m2l blocks during elimination.
- ``m2l[(k, i, j)]``: coupling from j's multipoles to i's locals,
  initially present exactly on interaction-list pairs.
- ``p2l`` / ``m2p``: hybrid couplings that only appear as elimination
  fill-in; empty after construction.

Two construction modes:

- Chebyshev (tol > 0): tensor interpolation of order p per dimension,
  per-cluster SVD truncation of the concatenated far-field row at tol,
  orthonormalized bases, nested transfers built bottom-up.
- Exact (tol == 0): identity bases, dense kernel far blocks. This is
  the truncation-free limit used to verify the solver against dense LU;
  finite-order interpolation could not provide it.

All blocks are stored for both (i, j) and (j, i); the algebra keeps the
extended system symmetric so mirrored blocks are transposes.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import svd

from .geometry import ClusterTree
from .kernels import Kernel, kernel_block
from .lowrank import cheb_nodes_1d, tensor_interp, tensor_nodes


class OperatorStore:
    def __init__(self, tree: ClusterTree, kernel: Kernel, p: int, tol: float):
        self.tree = tree
        self.kernel = kernel
        self.p = p
        self.tol = tol
        self.l2p = {}  # (k, i) -> (n_i, r_i) orthonormal columns
        self.child_offsets = {}  # (k, i) -> row offsets of child blocks, non-leaf
        self.p2p = {}  # (k, i, j) -> dense block
        self.m2l = {}
        self.p2l = {}
        self.m2p = {}
        self.pp_partners = {}  # (k, i) -> set of j with p2p[(k,i,j)]
        self.ml_partners = {}
        self.pl_rows = {}  # (k, i) -> set of j with p2l[(k,i,j)]
        self.pl_cols = {}  # (k, j) -> set of i with p2l[(k,i,j)]
        self.max_init_rank = 0

    # -- dimensions ----------------------------------------------------
    def rank(self, k: int, i: int) -> int:
        return self.l2p[(k, i)].shape[1]

    def part_dim(self, k: int, i: int) -> int:
        return self.l2p[(k, i)].shape[0]

    # -- block accessors ----------------------------------------------
    def _shape(self, kind: str, k: int, i: int, j: int) -> tuple:
        if kind == "p2p":
            return self.part_dim(k, i), self.part_dim(k, j)
        if kind == "m2l":
            return self.rank(k, i), self.rank(k, j)
        if kind == "p2l":
            return self.rank(k, i), self.part_dim(k, j)
        return self.part_dim(k, i), self.rank(k, j)  # m2p

    def get(self, kind: str, k: int, i: int, j: int) -> np.ndarray:
        """Current block padded to current dimensions (pads are zeros)."""
        blk = getattr(self, kind).get((k, i, j))
        shape = self._shape(kind, k, i, j)
        if blk is None:
            return np.zeros(shape)
        if blk.shape != shape:
            out = np.zeros(shape)
            out[: blk.shape[0], : blk.shape[1]] = blk
            getattr(self, kind)[(k, i, j)] = out
            return out
        return blk

    def add(self, kind: str, k: int, i: int, j: int, delta: np.ndarray) -> None:
        store = getattr(self, kind)
        key = (k, i, j)
        blk = store.get(key)
        if blk is None:
            store[key] = delta.copy()
        elif blk.shape == delta.shape:
            blk += delta
        else:
            shape = tuple(max(a, b) for a, b in zip(blk.shape, delta.shape))
            out = np.zeros(shape)
            out[: blk.shape[0], : blk.shape[1]] = blk
            out[: delta.shape[0], : delta.shape[1]] += delta
            store[key] = out
        if kind == "p2p":
            self.pp_partners.setdefault((k, i), set()).add(j)
            self.pp_partners.setdefault((k, j), set()).add(i)
        elif kind == "m2l":
            self.ml_partners.setdefault((k, i), set()).add(j)
            self.ml_partners.setdefault((k, j), set()).add(i)
        elif kind == "p2l":
            self.pl_rows.setdefault((k, i), set()).add(j)
            self.pl_cols.setdefault((k, j), set()).add(i)
        elif kind == "m2p":
            self.pl_rows.setdefault((k, j), set()).add(i)
            self.pl_cols.setdefault((k, i), set()).add(j)

    def drop_hybrid(self, k: int, p: int, q: int) -> None:
        """Remove the fill pair p2l[(k,p,q)] / m2p[(k,q,p)]."""
        self.p2l.pop((k, p, q), None)
        self.m2p.pop((k, q, p), None)
        self.pl_rows.get((k, p), set()).discard(q)
        self.pl_cols.get((k, q), set()).discard(p)

    def drop_p2p(self, k: int, p: int, q: int) -> None:
        self.p2p.pop((k, p, q), None)
        self.p2p.pop((k, q, p), None)
        self.pp_partners.get((k, p), set()).discard(q)
        self.pp_partners.get((k, q), set()).discard(p)

    def child_slices(self, k: int, i: int) -> list:
        off = self.child_offsets[(k, i)]
        return [slice(off[c], off[c + 1]) for c in range(len(off) - 1)]

    def refresh_child_offsets(self, k: int, i: int) -> None:
        children = self.tree.levels[k][i].children
        dims = [self.rank(k + 1, c) for c in children]
        self.child_offsets[(k, i)] = np.concatenate([[0], np.cumsum(dims)])


# ----------------------------------------------------------------------
# construction
# ----------------------------------------------------------------------


def _child_transfer_matrices(dim: int, p: int) -> list:
    """Interpolation from a parent box's tensor nodes to each child's nodes.

    Scale invariant: in parent coordinates child c's nodes are
    offset_c + nodes/2, so one matrix per child position serves every
    level. Child positions follow the Morton convention (x fastest).
    """
    n1 = cheb_nodes_1d(p)
    out = []
    for c in range(2**dim):
        offsets = np.array([(c >> axis) & 1 for axis in range(dim)], dtype=float)
        center = offsets - 0.5  # child centers at +-0.5 in parent coords
        child_nodes = center + 0.5 * np.stack(
            [a.ravel() for a in np.meshgrid(*([n1] * dim), indexing="ij")], axis=1
        )
        out.append(tensor_interp(child_nodes, np.zeros(dim), 1.0, p))
    return out


def init_operators(
    tree: ClusterTree, kernel: Kernel, p: int = 8, tol: float = 1e-14
) -> OperatorStore:
    """Build the initial operator set on a tree with lists computed."""
    store = OperatorStore(tree, kernel, p, tol)
    if tol == 0.0:
        _init_exact(store)
    else:
        _init_chebyshev(store)
    _init_leaf_p2p(store)
    for k in range(1, tree.depth):
        for c in tree.levels[k]:
            store.refresh_child_offsets(k, c.index)
    return store


def _init_leaf_p2p(store: OperatorStore) -> None:
    tree = store.tree
    kappa = tree.depth
    for c in tree.levels[kappa]:
        pi = tree.leaf_points(c.index)
        for j in c.neighbors:
            if j < c.index:
                continue
            blk = kernel_block(store.kernel, pi, tree.leaf_points(j))
            if j == c.index:
                np.fill_diagonal(blk, 1.0)
                store.add("p2p", kappa, c.index, c.index, blk)
            else:
                store.add("p2p", kappa, c.index, j, blk)
                store.add("p2p", kappa, j, c.index, blk.T.copy())


def _init_exact(store: OperatorStore) -> None:
    """Identity bases and dense far blocks: the tol = 0 limit."""
    tree = store.tree
    for k in range(tree.depth, 1, -1):
        for c in tree.levels[k]:
            lo, hi = tree.cluster_point_range(k, c.index)
            store.l2p[(k, c.index)] = np.eye(hi - lo)
    for k in range(2, tree.depth + 1):
        for c in tree.levels[k]:
            i = c.index
            lo_i, hi_i = tree.cluster_point_range(k, i)
            for j in c.interaction_list:
                if j < i:
                    continue
                lo_j, hi_j = tree.cluster_point_range(k, j)
                blk = kernel_block(
                    store.kernel, tree.points[lo_i:hi_i], tree.points[lo_j:hi_j]
                )
                store.add("m2l", k, i, j, blk)
                store.add("m2l", k, j, i, blk.T.copy())


def _init_chebyshev(store: OperatorStore) -> None:
    tree, kernel, p, tol = store.tree, store.kernel, store.p, store.tol
    dim, kappa = tree.dim, tree.depth
    node_dim = p**dim
    transfers = _child_transfer_matrices(dim, p)

    def box_nodes(k, c):
        return tensor_nodes(c.center, c.half_width, p, dim)

    raw_rows = {}  # (k, i) -> U_i^T B_i, the basis in raw node coordinates
    for k in range(kappa, 1, -1):
        clusters = tree.levels[k]
        nodes = [box_nodes(k, c) for c in clusters]
        raw_m2l_row = {}
        for c in clusters:
            i = c.index
            if not c.interaction_list:
                # no far field at this level; keep an empty basis
                raw_m2l_row[i] = np.zeros((node_dim, 0))
                continue
            raw_m2l_row[i] = np.concatenate(
                [kernel_block(kernel, nodes[i], nodes[j]) for j in c.interaction_list],
                axis=1,
            )
        for c in clusters:
            i = c.index
            if k == kappa:
                pts = tree.leaf_points(i)
                B = tensor_interp(pts, c.center, c.half_width, p)
            else:
                B = np.concatenate(
                    [
                        raw_rows[(k + 1, ch)] @ transfers[ci]
                        for ci, ch in enumerate(c.children)
                    ],
                    axis=0,
                )
            n_i = B.shape[0]
            U, s, _ = svd(raw_m2l_row[i], full_matrices=False)
            keep = min(int(np.sum(s >= (s[0] if len(s) else 0) * tol)), n_i, node_dim)
            cand = B @ U[:, :keep]
            Uc, sc, _ = svd(cand, full_matrices=False)
            r_i = int(np.sum(sc >= (sc[0] if len(sc) else 0) * 1e-14))
            basis = Uc[:, :r_i]
            store.l2p[(k, i)] = basis
            raw_rows[(k, i)] = basis.T @ B
            store.max_init_rank = max(store.max_init_rank, r_i)
        for c in clusters:
            i = c.index
            for j in c.interaction_list:
                if j < i:
                    continue
                raw = kernel_block(kernel, nodes[i], nodes[j])
                blk = raw_rows[(k, i)] @ raw @ raw_rows[(k, j)].T
                store.add("m2l", k, i, j, blk)
                store.add("m2l", k, j, i, blk.T.copy())


# ----------------------------------------------------------------------
# FMM matvec
# ----------------------------------------------------------------------


def fmm_matvec(store: OperatorStore, tree: ClusterTree, charges: np.ndarray) -> np.ndarray:
    """Apply the compressed operator: upward, transfer, downward, near-field.

    ``charges`` and the returned potentials are in the original
    (pre-Morton) point order.
    """
    charges = np.asarray(charges, dtype=float)
    if charges.shape[0] != tree.n_points:
        raise ValueError("charge vector length mismatch")
    x = charges[tree.point_permutation]
    kappa = tree.depth

    y = {}
    for k in range(kappa, 1, -1):
        for c in tree.levels[k]:
            i = c.index
            if k == kappa:
                lo, hi = c.point_range
                xi = x[lo:hi]
            else:
                xi = np.concatenate([y[(k + 1, ch)] for ch in c.children])
            y[(k, i)] = store.l2p[(k, i)].T @ xi

    z = {}
    for k in range(2, kappa + 1):
        for c in tree.levels[k]:
            i = c.index
            zi = np.zeros(store.rank(k, i))
            for j in c.interaction_list:
                zi += store.m2l[(k, i, j)] @ y[(k, j)]
            if k > 2:
                pk, pi = k - 1, i // (2**tree.dim)
                sl = store.child_slices(pk, pi)[i % (2**tree.dim)]
                zi += store.l2p[(pk, pi)][sl, :] @ z[(pk, pi)]
            z[(k, i)] = zi

    out = np.zeros_like(x)
    for c in tree.levels[kappa]:
        i = c.index
        lo, hi = c.point_range
        acc = store.l2p[(kappa, i)] @ z[(kappa, i)]
        for j in c.neighbors:
            lo_j, hi_j = tree.levels[kappa][j].point_range
            acc = acc + store.p2p[(kappa, i, j)] @ x[lo_j:hi_j]
        out[lo:hi] = acc

    result = np.empty_like(out)
    result[tree.point_permutation] = out
    return result


# ----------------------------------------------------------------------
# extended sparse system (verification path)
# ----------------------------------------------------------------------


def extended_layout(store: OperatorStore, tree: ClusterTree) -> list:
    """Slot order of the extended system's unknowns.

    Leaf level first as interleaved (x_i, z_i) pairs in Morton order;
    each coarser level then contributes, per cluster, its children's
    multipole slots followed by the cluster's own local slot (level 1
    has no locals). Each unknown's paired equation sits at the same
    position, which keeps the materialized matrix structurally
    symmetric: x_i pairs with the particle equation, z_i with the
    charge-lumping equation, and a child's y with its local-definition
    rows.
    """
    kappa = tree.depth
    slots = []
    for c in tree.levels[kappa]:
        i = c.index
        lo, hi = c.point_range
        slots.append(("x", kappa, i, hi - lo))
        slots.append(("z", kappa, i, store.rank(kappa, i)))
    for k in range(kappa - 1, 0, -1):
        for c in tree.levels[k]:
            for ch in c.children:
                slots.append(("y", k + 1, ch, store.rank(k + 1, ch)))
            if k >= 2:
                slots.append(("z", k, c.index, store.rank(k, c.index)))
    return slots


def assemble_extended_dense(
    store: OperatorStore, tree: ClusterTree, cap: int = 4096
):
    """Materialize the extended sparse system as a dense matrix.

    Only meaningful on a freshly initialized store (no fill-in, nothing
    eliminated). Returns (matrix, slots) where slots describes the
    unknown ordering as (symbol, level, cluster, dim) tuples.
    """
    if store.p2l or store.m2p:
        raise ValueError("extended assembly requires an un-eliminated store")
    slots = extended_layout(store, tree)
    offsets = {}
    pos = 0
    for sym, k, i, dim in slots:
        offsets[(sym, k, i)] = pos
        pos += dim
    m = pos
    if m > cap:
        raise ValueError(f"extended dimension {m} exceeds cap {cap}")
    A = np.zeros((m, m))
    kappa = tree.depth

    def xcols(k, i):
        """Column range(s) of cluster i's particle unknowns at level k."""
        if k == kappa:
            lo = offsets[("x", k, i)]
            c = tree.levels[k][i]
            return [(lo, c.point_range[1] - c.point_range[0])]
        out = []
        for ch in tree.levels[k][i].children:
            out.append((offsets[("y", k + 1, ch)], store.rank(k + 1, ch)))
        return out

    # leaf particle equations
    for c in tree.levels[kappa]:
        i = c.index
        r0 = offsets[("x", kappa, i)]
        n_i = store.part_dim(kappa, i)
        for j in c.neighbors:
            blk = store.p2p[(kappa, i, j)]
            c0 = offsets[("x", kappa, j)]
            A[r0 : r0 + n_i, c0 : c0 + blk.shape[1]] = blk
        U = store.l2p[(kappa, i)]
        z0 = offsets[("z", kappa, i)]
        A[r0 : r0 + n_i, z0 : z0 + U.shape[1]] = U

    # charge-lumping equations at every level with a basis
    for k in range(kappa, 1, -1):
        for c in tree.levels[k]:
            i = c.index
            U = store.l2p[(k, i)]
            r0 = offsets[("z", k, i)]
            r_i = U.shape[1]
            col = 0
            for c0, w in xcols(k, i):
                A[r0 : r0 + r_i, c0 : c0 + w] = U[col : col + w, :].T
                col += w
            y0 = offsets[("y", k, i)]
            A[r0 : r0 + r_i, y0 : y0 + r_i] -= np.eye(r_i)

    # local-definition equations: -z_i + sum M2L y_j + parent transfer
    for k in range(2, kappa + 1):
        for c in tree.levels[k]:
            i = c.index
            r0 = offsets[("y", k, i)]
            r_i = store.rank(k, i)
            z0 = offsets[("z", k, i)]
            A[r0 : r0 + r_i, z0 : z0 + r_i] -= np.eye(r_i)
            for j in c.interaction_list:
                blk = store.m2l[(k, i, j)]
                y0 = offsets[("y", k, j)]
                A[r0 : r0 + r_i, y0 : y0 + blk.shape[1]] = blk
            if k > 2:
                pk, pi = k - 1, i // (2**tree.dim)
                sl = store.child_slices(pk, pi)[i % (2**tree.dim)]
                Upar = store.l2p[(pk, pi)][sl, :]
                zp = offsets[("z", pk, pi)]
                A[r0 : r0 + r_i, zp : zp + Upar.shape[1]] = Upar
    return A, slots


def extended_rhs(store: OperatorStore, tree: ClusterTree, b: np.ndarray) -> np.ndarray:
    """Right-hand side for the extended system, from the original one."""
    slots = extended_layout(store, tree)
    b_m = np.asarray(b, dtype=float)[tree.point_permutation]
    out = np.zeros(sum(s[3] for s in slots))
    pos = 0
    for sym, k, i, dim in slots:
        if sym == "x":
            lo, hi = tree.levels[k][i].point_range
            out[pos : pos + dim] = b_m[lo:hi]
        pos += dim
    return out


def extended_restrict_x(
    store: OperatorStore, tree: ClusterTree, xe: np.ndarray
) -> np.ndarray:
    """Pull the original unknowns out of an extended solution vector."""
    slots = extended_layout(store, tree)
    out = np.empty(tree.n_points)
    pos = 0
    for sym, k, i, dim in slots:
        if sym == "x":
            lo, hi = tree.levels[k][i].point_range
            out[lo:hi] = xe[pos : pos + dim]
        pos += dim
    result = np.empty_like(out)
    result[tree.point_permutation] = out
    return result


def dump_extended(store: OperatorStore, tree: ClusterTree, path, cap: int = 4096) -> None:
    """Write the extended matrix as 'row col value' triplets (nonzeros)."""
    A, _ = assemble_extended_dense(store, tree, cap=cap)
    rows, cols = np.nonzero(A)
    with open(path, "w") as fh:
        fh.write(f"# extended system, dimension {A.shape[0]}\n")
        for r, c in zip(rows, cols):
            fh.write(f"{r} {c} {A[r, c]:.17g}\n")
