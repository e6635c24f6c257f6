"""Cluster-by-cluster elimination and back-substitution.

The factorization sweeps the tree from the leaf level upward. For each
cluster it eliminates the particle unknowns x_i and local coefficients
z_i using the cluster's particle equation and its charge-lumping
equation, whose coupled pivot

    S_i = [[P2P_ii, L2P_ii],
           [P2M_ii, 0     ]]

is square because local and multipole ranks coincide. The Schur update
-B S_i^{-1} C lands, for every ordered pair of still-referenced
partners, in the P2P / P2L / M2P / M2L channel selected by which side of
the pair is already eliminated. Fill-ins between well-separated clusters
are immediately compressed and redirected through the low-rank channel:
the fill is cross-approximated, the affected cluster's basis gains the
residual directions (kept orthonormal), and the M2L coupling between the
pair absorbs the redirected product. Fill-ins between neighbors stay
dense, which is what keeps every surviving dense block a neighbor block.

After a level is eliminated, the surviving multipole equations of its
clusters are exactly the particle equations of the next level up: the
parent near-field blocks are assembled from child M2L blocks and the
sweep repeats. The remaining top-level system in the level-2 multipoles
is factored densely.

Right-hand sides never enter the factorization: the redirections only
ever add multiples of equations with zero right-hand side (the lumping
equation of a live cluster, and its local-definition rows before
elimination), so a solve replays the Schur right-hand-side updates from
the stored couplings, solves the top system, and back-substitutes in
reverse elimination order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lu_factor, lu_solve, svd
from scipy.linalg.lapack import dgecon

from .geometry import ClusterTree
from .lowrank import aca_dense, svd_truncate
from .operators import OperatorStore

logger = logging.getLogger("ifmm")

PIVOT_CONDITION_LIMIT = 1e12


class SingularPivotError(RuntimeError):
    def __init__(self, level: int, index: int, cond: float):
        super().__init__(
            f"pivot for cluster {index} at level {level} is numerically "
            f"singular (condition estimate {cond:.2e})"
        )
        self.level = level
        self.index = index


@dataclass
class _Record:
    """Everything a solve needs to replay one cluster elimination."""

    level: int
    index: int
    lu: tuple
    n: int  # particle dimension at elimination
    r: int  # multipole/local rank at elimination (final)
    x_partners: list  # uneliminated neighbors coupled through p2p
    y_partners: list  # eliminated partners coupled through m2p
    z_partners: list  # eliminated partners whose local rows reference x_i


@dataclass
class LevelStats:
    clusters: int = 0
    max_rank: int = 0
    fillins_compressed: int = 0
    fillins_dense_kept: int = 0


@dataclass
class IfmmFactorization:
    store: OperatorStore
    tree: ClusterTree
    tol: float
    records: list = field(default_factory=list)
    top_lu: tuple | None = None
    top_offsets: np.ndarray | None = None
    level_stats: dict = field(default_factory=dict)
    r_m: int = 0

    @property
    def n(self) -> int:
        return self.tree.n_points


# ----------------------------------------------------------------------
# factorization
# ----------------------------------------------------------------------


def factorize(
    store: OperatorStore,
    tree: ClusterTree,
    tol: float | None = None,
    diagnostics: bool = False,
    release_m2l: bool = True,
) -> IfmmFactorization:
    """Run the elimination sweep and factor the top-level system.

    ``tol`` controls the fill-in compression (defaults to the store's
    construction tolerance); tol == 0 disables truncation entirely.
    The store is consumed: its blocks are mutated in place.
    """
    if tol is None:
        tol = store.tol
    for level in tree.levels.values():
        for c in level:
            c.eliminated = False
    fact = IfmmFactorization(store=store, tree=tree, tol=tol)
    fact.r_m = store.max_init_rank
    kappa = tree.depth

    for k in range(kappa, 1, -1):
        if k < kappa:
            _form_parent_p2p(store, tree, k)
            if release_m2l:
                _release_level_m2l(store, k + 1)
        stats = LevelStats(clusters=len(tree.levels[k]))
        fact.level_stats[k] = stats
        ilists = [set(c.interaction_list) for c in tree.levels[k]]
        for c in tree.levels[k]:
            _eliminate_cluster(store, tree, k, c.index, tol, fact, stats, ilists)
        if diagnostics:
            logger.info(
                "level=%d,k_clusters=%d,max_rank=%d,fillins_compressed=%d,"
                "fillins_dense_kept=%d",
                k,
                stats.clusters,
                stats.max_rank,
                stats.fillins_compressed,
                stats.fillins_dense_kept,
            )
        fact.r_m = max(fact.r_m, stats.max_rank)

    _factor_top_level(fact)
    if release_m2l:
        _release_level_m2l(store, 2)
    return fact


def _release_level_m2l(store: OperatorStore, k: int) -> None:
    for key in [key for key in store.m2l if key[0] == k]:
        del store.m2l[key]
    for key in [key for key in store.ml_partners if key[0] == k]:
        del store.ml_partners[key]


def _form_parent_p2p(store: OperatorStore, tree: ClusterTree, k: int) -> None:
    """Assemble level-k near-field blocks from the children's M2L blocks."""
    ck = k + 1
    for c in tree.levels[k]:
        i = c.index
        store.refresh_child_offsets(k, i)
    for c in tree.levels[k]:
        i = c.index
        rows = store.child_offsets[(k, i)]
        for j in c.neighbors:
            if j < i:
                continue
            cj = tree.levels[k][j]
            cols = store.child_offsets[(k, j)]
            blk = np.zeros((rows[-1], cols[-1]))
            nonzero = False
            for a, ca in enumerate(c.children):
                for b, cb in enumerate(cj.children):
                    sub = store.m2l.get((ck, ca, cb))
                    if sub is not None:
                        blk[
                            rows[a] : rows[a] + sub.shape[0],
                            cols[b] : cols[b] + sub.shape[1],
                        ] = sub
                        nonzero = True
            if not nonzero:
                continue
            store.add("p2p", k, i, j, blk)
            if j != i:
                store.add("p2p", k, j, i, blk.T.copy())


def _eliminate_cluster(
    store: OperatorStore,
    tree: ClusterTree,
    k: int,
    i: int,
    tol: float,
    fact: IfmmFactorization,
    stats: LevelStats,
    ilists: list,
) -> None:
    cluster = tree.levels[k][i]
    clusters = tree.levels[k]
    U = store.l2p[(k, i)]
    n, r = U.shape

    S = np.zeros((n + r, n + r))
    S[:n, :n] = store.get("p2p", k, i, i)
    S[:n, n:] = U
    S[n:, :n] = U.T
    anorm = np.linalg.norm(S, 1)
    lu = lu_factor(S)
    rcond = dgecon(lu[0], anorm, norm="1")[0]
    if not np.isfinite(rcond) or rcond <= 1.0 / PIVOT_CONDITION_LIMIT:
        raise SingularPivotError(k, i, 1.0 / max(rcond, 1e-300))

    x_partners = sorted(
        j
        for j in store.pp_partners.get((k, i), ())
        if j != i and not clusters[j].eliminated
    )
    # M2P(i, j) and P2L(j, i) come in mirror pairs, so the partners whose
    # multipoles appear in i's particle equation are exactly the partners
    # whose local rows reference i's particles.
    y_partners = sorted(store.pl_cols.get((k, i), ()))
    z_partners = y_partners

    # pivot-row couplings, stacked column-wise; last block is y_i itself
    col_blocks = [("x", j, store.get("p2p", k, i, j)) for j in x_partners]
    col_blocks += [("y", j, store.get("m2p", k, i, j)) for j in y_partners]
    widths = [blk.shape[1] for _, _, blk in col_blocks]
    total = sum(widths) + r
    C = np.zeros((n + r, total))
    pos = 0
    col_slices = []
    for sym, j, blk in col_blocks:
        C[:n, pos : pos + blk.shape[1]] = blk
        col_slices.append((sym, j, slice(pos, pos + blk.shape[1])))
        pos += blk.shape[1]
    C[n:, pos:] = -np.eye(r)
    col_slices.append(("y", i, slice(pos, pos + r)))

    X = lu_solve(lu, C)
    Xtop = X[:n]

    # rows referencing (x_i, z_i): live neighbors' particle equations,
    # eliminated partners' local rows, and i's own local rows
    row_blocks = [("x", j, store.p2p[(k, j, i)]) for j in x_partners]
    row_blocks += [("z", j, store.p2l[(k, j, i)]) for j in z_partners]

    fills_pp = set()
    fills_hybrid = set()
    for rsym, j, blk in row_blocks:
        Y = blk @ Xtop
        _scatter_updates(store, k, j, rsym, Y, col_slices, i, fills_pp, fills_hybrid)
    Yz = -X[n:]
    _scatter_updates(store, k, i, "z", Yz, col_slices, i, fills_pp, fills_hybrid)

    cluster.eliminated = True
    fact.records.append(
        _Record(
            level=k,
            index=i,
            lu=lu,
            n=n,
            r=r,
            x_partners=x_partners,
            y_partners=y_partners,
            z_partners=z_partners,
        )
    )

    for p, q in sorted(fills_hybrid):
        if q in ilists[p]:
            _compress_hybrid(store, tree, k, p, q, tol, stats)
    for p, q in sorted(fills_pp):
        if q in ilists[p]:
            _compress_p2p(store, tree, k, p, q, tol, stats)


def _scatter_updates(
    store: OperatorStore,
    k: int,
    row_j: int,
    rsym: str,
    Y: np.ndarray,
    col_slices: list,
    pivot_i: int,
    fills_pp: set,
    fills_hybrid: set,
) -> None:
    """Distribute -B_e S^{-1} C into the operator channels."""
    for csym, l, sl in col_slices:
        delta = -Y[:, sl]
        if rsym == "x" and csym == "x":
            store.add("p2p", k, row_j, l, delta)
            if row_j != l:
                fills_pp.add((row_j, l) if row_j < l else (l, row_j))
        elif rsym == "x" and csym == "y":
            store.add("m2p", k, row_j, l, delta)
            if row_j != l:
                fills_hybrid.add((l, row_j))
        elif rsym == "z" and csym == "x":
            store.add("p2l", k, row_j, l, delta)
            if row_j != l:
                fills_hybrid.add((row_j, l))
        else:
            store.add("m2l", k, row_j, l, delta)


# ----------------------------------------------------------------------
# fill-in compression
# ----------------------------------------------------------------------


def _compress_fill_block(F: np.ndarray, tol: float):
    """Cross-approximate a fill, returning (left, right) with right orthonormal."""
    if tol == 0.0:
        lr = svd_truncate(F, 0.0)
    else:
        lr = aca_dense(F, tol)
    return lr


def _direction_cutoff(tol: float, scale: float) -> float:
    # tol == 0 runs truncation-free, but directions at the rounding floor
    # are pure noise and would inflate ranks past the particle dimension
    return (tol if tol > 0 else 1e-13) * scale


def _new_directions(
    weight: np.ndarray, factor: np.ndarray, U: np.ndarray, tol: float, scale: float
) -> np.ndarray:
    """Orthonormal directions of ``factor`` outside the basis ``U``.

    ``weight`` carries the fill's other factor so the singular values of
    weight @ resid.T measure actual reconstruction error; directions
    below tol * scale are dropped. The residual is orthogonalized twice
    (a single Gram-Schmidt pass leaves O(eps/||resid||) relative overlap
    when the factor lies nearly in the basis, and such junk directions
    would corrupt the basis). The count is capped so the basis never
    exceeds the particle dimension, which elimination requires.
    """
    cap = U.shape[0] - U.shape[1]
    if cap <= 0 or factor.shape[1] == 0:
        return np.zeros((U.shape[0], 0))
    resid = factor - U @ (U.T @ factor)
    resid -= U @ (U.T @ resid)
    M = weight @ resid.T
    Um, s, Vt = svd(M, full_matrices=False)
    w = min(int(np.sum(s > _direction_cutoff(tol, scale))), cap)
    W = Vt[:w].T
    if w:
        W -= U @ (U.T @ W)
    return W


def _compress_hybrid(
    store: OperatorStore,
    tree: ClusterTree,
    k: int,
    p: int,
    q: int,
    tol: float,
    stats: LevelStats,
) -> None:
    """Redirect the P2L_pq / M2P_qp fill pair through q's multipoles.

    p is eliminated, q is not; the pair is well separated. The fill is
    cross-approximated, q's basis is augmented with the directions the
    current basis misses, and the M2L coupling between p and q absorbs
    the product so the extended system is unchanged up to tol.
    """
    F = store.p2l.get((k, p, q))
    if F is None:
        return
    lr = _compress_fill_block(F, tol)
    if lr.incompressible:
        stats.fillins_dense_kept += 1
        return
    stats.fillins_compressed += 1
    stats.max_rank = max(stats.max_rank, lr.rank)
    A, B = lr.left, lr.right

    scale = np.sqrt(np.sum(A * A))  # ||F||_F since B is orthonormal
    W = _new_directions(A, B, store.l2p[(k, q)], tol, scale)
    if W.shape[1]:
        _augment_basis(store, tree, k, q, W)
    delta = A @ (store.l2p[(k, q)].T @ B).T
    store.add("m2l", k, p, q, delta)
    store.add("m2l", k, q, p, delta.T.copy())
    store.drop_hybrid(k, p, q)


def _compress_p2p(
    store: OperatorStore,
    tree: ClusterTree,
    k: int,
    p: int,
    q: int,
    tol: float,
    stats: LevelStats,
) -> None:
    """Redirect a particle-particle fill between well-separated live clusters."""
    F = store.p2p.get((k, p, q))
    if F is None:
        return
    lr = _compress_fill_block(F, tol)
    if lr.incompressible:
        stats.fillins_dense_kept += 1
        return
    stats.fillins_compressed += 1
    stats.max_rank = max(stats.max_rank, lr.rank)
    A, B = lr.left, lr.right
    scale = np.sqrt(np.sum(A * A))

    Wq = _new_directions(A, B, store.l2p[(k, q)], tol, scale)
    if Wq.shape[1]:
        _augment_basis(store, tree, k, q, Wq)
    # the left factor carries the singular values, so weight the p side
    # by the (orthonormal) right factor's unit columns
    Wp = _new_directions(np.eye(B.shape[1]), A, store.l2p[(k, p)], tol, scale)
    if Wp.shape[1]:
        _augment_basis(store, tree, k, p, Wp)

    left = store.l2p[(k, p)].T @ A
    right = store.l2p[(k, q)].T @ B
    delta = left @ right.T
    store.add("m2l", k, p, q, delta)
    store.add("m2l", k, q, p, delta.T.copy())
    store.drop_p2p(k, p, q)


def _maybe_consolidate(
    store: OperatorStore,
    tree: ClusterTree,
    k: int,
    q: int,
    tol: float,
    pre_ranks: dict,
) -> None:
    """Recompress cluster q's basis after augmentation growth.

    Augmentation only ever appends directions, so distinct fills keep
    adding nearly-redundant ones and the basis would creep toward the
    particle dimension. Once it exceeds 1.5x its rank at the start of
    the level sweep, the cluster's entire coupling row (its M2L blocks
    plus the transfer to its parent) is re-truncated jointly at tol and
    the basis rotated onto the surviving directions. Every reference to
    the cluster's multipoles is transformed consistently; a live cluster
    has no other couplings, so the records of finished eliminations are
    untouched.
    """
    if tol <= 0:
        return
    U = store.l2p[(k, q)]
    n, r = U.shape
    if r <= max(1.5 * pre_ranks[q], 8):
        return
    partners = sorted(store.ml_partners.get((k, q), ()))
    blocks = [store.get("m2l", k, q, l) for l in partners]
    pk, pi = k - 1, q // (2**tree.dim)
    parent_rows = None
    if k > 2 and (pk, pi) in store.l2p:
        sl = store.child_slices(pk, pi)[q % (2**tree.dim)]
        parent_rows = store.l2p[(pk, pi)][sl, :]
        blocks.append(parent_rows)
    if not blocks:
        return
    row = np.concatenate(blocks, axis=1)
    T, s, _ = svd(row, full_matrices=False)
    if len(s) == 0 or s[0] == 0.0:
        return
    r_new = int(np.sum(s >= s[0] * tol))
    if r_new >= r:
        return
    T = T[:, :r_new]
    store.l2p[(k, q)] = U @ T
    for l in partners:
        store.m2l[(k, q, l)] = T.T @ store.get("m2l", k, q, l)
        store.m2l[(k, l, q)] = store.get("m2l", k, l, q) @ T
    if parent_rows is not None:
        P = store.l2p[(pk, pi)]
        store.l2p[(pk, pi)] = np.concatenate(
            [P[: sl.start], T.T @ parent_rows, P[sl.stop :]], axis=0
        )
        store.refresh_child_offsets(pk, pi)
    elif (pk, pi) in store.child_offsets:
        store.refresh_child_offsets(pk, pi)


def _augment_basis(
    store: OperatorStore, tree: ClusterTree, k: int, q: int, W: np.ndarray
) -> None:
    """Grow cluster q's basis by the orthonormal directions W.

    Existing multipole/local components keep their meaning (pure
    append), so every block touching q only needs zero padding, which
    the store applies lazily. The parent's stacked transfer gains
    matching zero rows: the new directions carry no far-field content
    of their own since the original basis already interpolates the far
    field for every charge distribution in the box.
    """
    w = W.shape[1]
    U = store.l2p[(k, q)]
    r_old = U.shape[1]
    store.l2p[(k, q)] = np.concatenate([U, W], axis=1)
    if k >= 2:
        pk, pi = k - 1, q // (2**tree.dim)
        if (pk, pi) in store.child_offsets:
            pos = q % (2**tree.dim)
            at = store.child_offsets[(pk, pi)][pos] + r_old
            if (pk, pi) in store.l2p:
                store.l2p[(pk, pi)] = np.insert(
                    store.l2p[(pk, pi)], [at] * w, 0.0, axis=0
                )
            store.refresh_child_offsets(pk, pi)


# ----------------------------------------------------------------------
# top level and solve
# ----------------------------------------------------------------------


def _factor_top_level(fact: IfmmFactorization) -> None:
    store, tree = fact.store, fact.tree
    level2 = tree.levels[2]
    dims = np.array([store.rank(2, c.index) for c in level2])
    offsets = np.concatenate([[0], np.cumsum(dims)])
    m = int(offsets[-1])
    top = np.zeros((m, m))
    for ci in level2:
        i = ci.index
        for cj in level2:
            j = cj.index
            blk = store.m2l.get((2, i, j))
            if blk is not None:
                top[
                    offsets[i] : offsets[i] + blk.shape[0],
                    offsets[j] : offsets[j] + blk.shape[1],
                ] = blk
    fact.top_lu = lu_factor(top)
    fact.top_offsets = offsets


def solve(fact: IfmmFactorization, rhs: np.ndarray) -> np.ndarray:
    """Solve the factored system for one right-hand side.

    Replays the elimination's right-hand-side updates in order, solves
    the dense top-level system, then recovers every cluster's unknowns
    in reverse elimination order. Returns the solution in original
    point order.
    """
    store, tree = fact.store, fact.tree
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape != (tree.n_points,):
        raise ValueError(f"rhs must have shape ({tree.n_points},)")
    b = rhs[tree.point_permutation]
    kappa = tree.depth
    two_d = 2**tree.dim

    rhs_x = {}
    for c in tree.levels[kappa]:
        lo, hi = c.point_range
        rhs_x[(kappa, c.index)] = b[lo:hi].copy()
    rhs_z = {}

    gs = []
    current_level = kappa
    for rec in fact.records:
        k, i = rec.level, rec.index
        if k != current_level:
            # entering a coarser level: its particle equations are the
            # children's surviving local rows
            for c in tree.levels[k]:
                rhs_x[(k, c.index)] = np.concatenate(
                    [rhs_z[(k + 1, ch)] for ch in c.children]
                )
            current_level = k
        g = lu_solve(rec.lu, np.concatenate([rhs_x[(k, i)], np.zeros(rec.r)]))
        gs.append(g)
        gtop = g[: rec.n]
        for j in rec.x_partners:
            rhs_x[(k, j)] -= store.p2p[(k, j, i)] @ gtop
        for j in rec.z_partners:
            rhs_z[(k, j)] -= store.p2l[(k, j, i)] @ gtop
        rhs_z[(k, i)] = g[rec.n :].copy()

    offsets = fact.top_offsets
    rhs_top = np.concatenate([rhs_z[(2, c.index)] for c in tree.levels[2]])
    y_flat = lu_solve(fact.top_lu, rhs_top)
    y = {
        (2, c.index): y_flat[offsets[c.index] : offsets[c.index + 1]]
        for c in tree.levels[2]
    }

    x_val = {}
    by_level = {}
    for idx, rec in enumerate(fact.records):
        by_level.setdefault(rec.level, []).append((rec, gs[idx]))
    for k in range(2, kappa + 1):
        for rec, g in reversed(by_level[k]):
            i = rec.index
            top = np.zeros(rec.n)
            for j in rec.x_partners:
                top += store.p2p[(k, i, j)] @ x_val[(k, j)]
            for j in rec.y_partners:
                top += store.m2p[(k, i, j)] @ y[(k, j)]
            coup = np.concatenate([top, -y[(k, i)]])
            sol = g - lu_solve(rec.lu, coup)
            x_val[(k, i)] = sol[: rec.n]
            if k < kappa:
                off = store.child_offsets[(k, i)]
                for pos, ch in enumerate(tree.levels[k][i].children):
                    y[(k + 1, ch)] = sol[off[pos] : off[pos + 1]]

    out = np.empty(tree.n_points)
    for c in tree.levels[kappa]:
        lo, hi = c.point_range
        out[lo:hi] = x_val[(kappa, c.index)]
    result = np.empty_like(out)
    result[tree.point_permutation] = out
    return result
