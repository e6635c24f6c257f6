"""Fast direct solver for dense kernel systems with FMM structure.

The package factorizes identity-plus-kernel systems whose off-diagonal
blocks follow the strong-admissibility pattern (dense between neighbor
clusters, low-rank between well-separated ones) in near-linear time, by
rewriting the system in extended sparse form and eliminating cluster by
cluster while compressing well-separated fill-in on the fly.
"""

from .estimator import IfmmSolver
from .geometry import (
    ClusterTree,
    PointSet,
    build_tree,
    compute_lists,
    generate_balanced_points,
    load_points,
    save_points,
)
from .kernels import KERNEL_NAMES, Kernel, assemble_dense, make_kernel
from .lowrank import LowRank, aca, cheb_basis, m2l_kernel_block, svd_truncate
from .operators import (
    OperatorStore,
    assemble_extended_dense,
    dump_extended,
    fmm_matvec,
    init_operators,
)
from .oracle import DenseSystem, dense_matvec, dense_solve
from .rankstudy import RankReport, schur_rank_experiment
from .solver import IfmmFactorization, SingularPivotError, factorize, solve

__all__ = [
    "ClusterTree",
    "DenseSystem",
    "IfmmFactorization",
    "IfmmSolver",
    "Kernel",
    "KERNEL_NAMES",
    "LowRank",
    "OperatorStore",
    "PointSet",
    "RankReport",
    "SingularPivotError",
    "aca",
    "assemble_dense",
    "assemble_extended_dense",
    "build_tree",
    "cheb_basis",
    "compute_lists",
    "dense_matvec",
    "dense_solve",
    "dump_extended",
    "factorize",
    "fmm_matvec",
    "generate_balanced_points",
    "init_operators",
    "load_points",
    "m2l_kernel_block",
    "make_kernel",
    "save_points",
    "schur_rank_experiment",
    "solve",
]

__version__ = "0.1.0"
