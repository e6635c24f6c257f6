"""Point sets and uniform 2^d cluster trees with Morton ordering.

This module is the geometric backbone of the solver. It turns a set of
points in the reference box [-1, 1]^d into a uniform (non-adaptive) 2^d
tree whose leaves own contiguous ranges of Morton-sorted points, and it
computes the per-cluster neighbor and interaction lists that drive both
the fast matrix-vector product and the elimination order of the direct
solver.

Conventions fixed here (and relied on everywhere else):

- The bounding box is always [-1, 1]^d. Points outside it are an error;
  nothing is rescaled silently.
- Morton codes interleave bits with the x bit least significant, then y,
  then z.
- Levels are numbered 1..depth; level k holds exactly 2^(d*k) clusters,
  and the children of cluster i at level k are clusters
  2^d*i .. 2^d*i + 2^d - 1 at level k+1.
- A cluster counts as its own neighbor. Adjacency is closed-box
  intersection: boxes sharing an edge or corner are neighbors.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

BOX_HALF_WIDTH = 1.0
DUPLICATE_TOL = 1e-14


@dataclass
class PointSet:
    """Points in the reference box [-1, 1]^dim.

    Construction validates that every coordinate lies inside the box and
    that no two points coincide to within ``DUPLICATE_TOL`` absolute
    distance; duplicates are rejected rather than perturbed so that
    comparisons against dense reference solves stay exact.
    """

    dim: int
    points: np.ndarray

    def __post_init__(self):
        self.points = np.ascontiguousarray(self.points, dtype=float)
        if self.dim not in (1, 2, 3):
            raise ValueError(f"dim must be 1, 2 or 3, got {self.dim}")
        if self.points.ndim != 2 or self.points.shape[1] != self.dim:
            raise ValueError(
                f"points must have shape (n, {self.dim}), got {self.points.shape}"
            )
        if np.abs(self.points).max(initial=0.0) > BOX_HALF_WIDTH:
            raise ValueError("point outside the reference box [-1, 1]^d")
        if len(self.points) > 1:
            pairs = cKDTree(self.points).query_pairs(DUPLICATE_TOL)
            if pairs:
                i, j = sorted(pairs)[0]
                raise ValueError(f"duplicate points at indices {i} and {j}")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class Cluster:
    """One box of the uniform tree.

    ``grid`` holds the integer cell coordinates of the box at its level;
    ``index`` is the Morton index obtained by interleaving them.
    ``point_range`` is set on leaves only and indexes the Morton-permuted
    point array. ``neighbors`` includes the cluster itself.
    """

    level: int
    index: int
    grid: tuple
    center: np.ndarray
    half_width: float
    children: list = field(default_factory=list)
    point_range: tuple | None = None
    neighbors: list = field(default_factory=list)
    interaction_list: list = field(default_factory=list)
    eliminated: bool = False


@dataclass
class ClusterTree:
    """Uniform 2^d tree over a Morton-permuted point set.

    ``levels[k]`` (k = 1..depth) lists the 2^(d*k) clusters of level k in
    Morton order. ``points`` holds the permuted coordinates;
    ``point_permutation`` maps permuted position -> original index.
    """

    depth: int
    dim: int
    levels: dict
    points: np.ndarray
    point_permutation: np.ndarray

    def clusters(self, level: int) -> list:
        return self.levels[level]

    @property
    def n_points(self) -> int:
        return len(self.points)

    def leaf_points(self, index: int) -> np.ndarray:
        lo, hi = self.levels[self.depth][index].point_range
        return self.points[lo:hi]

    def cluster_point_range(self, level: int, index: int) -> tuple:
        """Contiguous permuted-point range below any cluster (not just leaves)."""
        step = 2 ** (self.dim * (self.depth - level))
        leaves = self.levels[self.depth]
        lo = leaves[index * step].point_range[0]
        hi = leaves[(index + 1) * step - 1].point_range[1]
        return lo, hi


def morton_encode(grid: np.ndarray, dim: int, bits: int) -> np.ndarray:
    """Interleave integer grid coordinates into Morton codes, x bit first."""
    grid = np.asarray(grid, dtype=np.int64)
    codes = np.zeros(grid.shape[0], dtype=np.int64)
    for b in range(bits):
        for axis in range(dim):
            codes |= ((grid[:, axis] >> b) & 1) << (b * dim + axis)
    return codes


def morton_decode(codes: np.ndarray, dim: int, bits: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    grid = np.zeros((codes.shape[0], dim), dtype=np.int64)
    for b in range(bits):
        for axis in range(dim):
            grid[:, axis] |= ((codes >> (b * dim + axis)) & 1) << b
    return grid


def generate_balanced_points(
    n_total: int, dim: int, depth: int, seed: int
) -> PointSet:
    """Draw points uniformly inside each leaf cell of the uniform grid.

    Cell counts differ by at most one; the n_total mod n_cells cells with
    an extra point are the first ones in Morton order. Deterministic for
    a fixed seed.
    """
    if dim not in (1, 2, 3):
        raise ValueError(f"dim must be 1, 2 or 3, got {dim}")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    n_cells = 2 ** (dim * depth)
    if n_total < n_cells:
        raise ValueError(
            f"{n_total} points cannot cover {n_cells} leaf cells at depth {depth}"
        )
    rng = np.random.default_rng(seed)
    base, extra = divmod(n_total, n_cells)
    counts = np.full(n_cells, base, dtype=int)
    counts[:extra] += 1
    cell_width = 2.0 * BOX_HALF_WIDTH / (2**depth)
    grid = morton_decode(np.arange(n_cells), dim, depth)
    lo = -BOX_HALF_WIDTH + grid * cell_width
    pts = np.concatenate(
        [lo[c] + cell_width * rng.random((counts[c], dim)) for c in range(n_cells)]
    )
    return PointSet(dim=dim, points=pts)


def build_tree(ps: PointSet, depth: int) -> ClusterTree:
    """Build the uniform tree and permute the points into Morton order.

    Every leaf cell must receive at least one point; an empty leaf means
    the depth is too large for the input distribution.
    """
    if depth < 2:
        raise ValueError("depth must be >= 2 (interaction lists start at level 2)")
    dim, n = ps.dim, len(ps)
    side = 2**depth
    cell_width = 2.0 * BOX_HALF_WIDTH / side
    cell = np.floor((ps.points + BOX_HALF_WIDTH) / cell_width).astype(np.int64)
    np.clip(cell, 0, side - 1, out=cell)
    codes = morton_encode(cell, dim, depth)
    perm = np.argsort(codes, kind="stable")
    sorted_codes = codes[perm]

    counts = np.bincount(sorted_codes, minlength=2 ** (dim * depth))
    if counts.min() == 0:
        raise ValueError(
            f"leaf cell {int(np.argmin(counts))} is empty at depth {depth}"
        )
    offsets = np.concatenate([[0], np.cumsum(counts)])

    levels = {}
    for k in range(1, depth + 1):
        n_k = 2 ** (dim * k)
        grid_k = morton_decode(np.arange(n_k), dim, k)
        width_k = 2.0 * BOX_HALF_WIDTH / (2**k)
        centers = -BOX_HALF_WIDTH + (grid_k + 0.5) * width_k
        clusters = []
        for i in range(n_k):
            c = Cluster(
                level=k,
                index=i,
                grid=tuple(int(g) for g in grid_k[i]),
                center=centers[i],
                half_width=width_k / 2,
            )
            if k < depth:
                c.children = list(range((2**dim) * i, (2**dim) * (i + 1)))
            else:
                c.point_range = (int(offsets[i]), int(offsets[i + 1]))
            clusters.append(c)
        levels[k] = clusters

    return ClusterTree(
        depth=depth,
        dim=dim,
        levels=levels,
        points=ps.points[perm],
        point_permutation=perm,
    )


def compute_lists(tree: ClusterTree) -> ClusterTree:
    """Fill in neighbor and interaction lists for every cluster.

    Neighbors at level k are the same-level boxes whose closures touch
    (max grid-coordinate distance <= 1), including the box itself. The
    interaction list collects children of the parent's neighbors that are
    not themselves neighbors; at level 1 it is empty because every box
    touches every other one.
    """
    dim = tree.dim
    for k in range(1, tree.depth + 1):
        side = 2**k
        for c in tree.levels[k]:
            g = np.array(c.grid)
            shifts = np.stack(
                np.meshgrid(*([[-1, 0, 1]] * dim), indexing="ij"), axis=-1
            ).reshape(-1, dim)
            cand = g + shifts
            ok = np.all((cand >= 0) & (cand < side), axis=1)
            c.neighbors = sorted(
                int(m) for m in morton_encode(cand[ok], dim, k)
            )
    for k in range(1, tree.depth + 1):
        for c in tree.levels[k]:
            if k == 1:
                c.interaction_list = []
                continue
            parent = tree.levels[k - 1][c.index // (2**dim)]
            cand = []
            for pn in parent.neighbors:
                cand.extend(range((2**dim) * pn, (2**dim) * (pn + 1)))
            nb = set(c.neighbors)
            c.interaction_list = sorted(j for j in cand if j not in nb)
    return tree


def load_points(path, dim: int | None = None) -> PointSet:
    """Read a point file: one point per line, '#' lines ignored."""
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rows.append([float(tok) for tok in line.split()])
    if not rows:
        raise ValueError(f"no points in {path}")
    pts = np.array(rows, dtype=float)
    if dim is not None and pts.shape[1] != dim:
        raise ValueError(f"expected dim {dim}, file has {pts.shape[1]}")
    return PointSet(dim=pts.shape[1], points=pts)


def save_points(ps: PointSet, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"# {len(ps)} points, dim {ps.dim}\n")
        for row in ps.points:
            fh.write(" ".join(f"{x:.17g}" for x in row) + "\n")
