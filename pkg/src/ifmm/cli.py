"""Benchmark and verification command line.

Subcommands:

- ``bench``: the scaling benchmark. For each size, points are drawn so
  the tree is balanced, the system is factorized, and a manufactured
  solution is recovered; reports assembly/factor/solve times, the
  maximum compressed rank, and the relative l2 error. The right-hand
  side comes from an exact blockwise matvec up to ``--oracle-cap``
  unknowns, and from the compressed operator above it (flagged in the
  output).
- ``rankstudy``: the three-cluster rank experiments, CSV per row.
- ``verify``: factorize a small instance and compare against the dense
  full-pivot LU reference.
- ``dump-extended``: write the extended sparse system's coordinate
  triplets for inspection.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .estimator import default_depth
from .geometry import build_tree, compute_lists, generate_balanced_points
from .kernels import KERNEL_NAMES, assemble_dense, make_kernel
from .operators import dump_extended, fmm_matvec, init_operators
from .oracle import DenseSystem, dense_matvec, dense_solve
from .rankstudy import schur_rank_experiment
from .solver import factorize, solve

BENCH_COLUMNS = [
    "kernel",
    "n",
    "depth",
    "tol",
    "t_a",
    "t_f",
    "t_s",
    "r_m",
    "rel_error",
    "oracle_used",
]


@dataclass
class BenchConfig:
    kernel: str
    sizes: list
    tol: float = 1e-14
    a: float = 0.001
    seed: int = 0
    depth: int | None = None  # None = auto
    p: int = 8
    dim: int = 2
    oracle_cap: int = 20000
    diagnostics: bool = False
    parallel_instances: int = 1


@dataclass
class BenchmarkResult:
    kernel: str
    n: int
    depth: int
    tol: float
    t_a: float
    t_f: float
    t_s: float
    r_m: int
    rel_error: float
    oracle_used: bool


def _run_one(cfg: BenchConfig, n: int) -> BenchmarkResult:
    kernel = make_kernel(cfg.kernel, a=cfg.a)
    depth = cfg.depth or default_depth(n, cfg.dim)
    rng = np.random.default_rng([cfg.seed, n])

    t0 = time.perf_counter()
    ps = generate_balanced_points(n, cfg.dim, depth, seed=cfg.seed + n)
    tree = compute_lists(build_tree(ps, depth))
    store = init_operators(tree, kernel, p=cfg.p, tol=cfg.tol)
    t_a = time.perf_counter() - t0

    x_exact = rng.uniform(-1.0, 1.0, n)
    oracle_used = n <= cfg.oracle_cap
    if oracle_used:
        b = dense_matvec(kernel, ps, x_exact)
    else:
        b = fmm_matvec(store, tree, x_exact)

    t0 = time.perf_counter()
    fact = factorize(store, tree, tol=cfg.tol, diagnostics=cfg.diagnostics)
    t_f = time.perf_counter() - t0

    solve_times = []
    for _ in range(3):
        t0 = time.perf_counter()
        x = solve(fact, b)
        solve_times.append(time.perf_counter() - t0)
    t_s = float(np.median(solve_times))

    rel = float(np.linalg.norm(x - x_exact) / np.linalg.norm(x_exact))
    return BenchmarkResult(
        kernel=cfg.kernel,
        n=n,
        depth=depth,
        tol=cfg.tol,
        t_a=t_a,
        t_f=t_f,
        t_s=t_s,
        r_m=fact.r_m,
        rel_error=rel,
        oracle_used=oracle_used,
    )


def run_benchmark(cfg: BenchConfig) -> list:
    if cfg.parallel_instances > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallel_instances) as pool:
            return list(pool.map(lambda n: _run_one(cfg, n), cfg.sizes))
    return [_run_one(cfg, n) for n in cfg.sizes]


def _emit_results(results: list, out: str | None) -> None:
    rows = [asdict(r) for r in results]
    if out and out.endswith(".json"):
        with open(out, "w") as fh:
            json.dump(rows, fh, indent=2)
        return
    lines = [",".join(BENCH_COLUMNS)]
    for row in rows:
        lines.append(
            ",".join(
                f"{row[c]:.6g}" if isinstance(row[c], float) else str(row[c])
                for c in BENCH_COLUMNS
            )
        )
    text = "\n".join(lines) + "\n"
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _cmd_bench(args) -> int:
    cfg = BenchConfig(
        kernel=args.kernel,
        sizes=[int(s) for s in args.sizes.split(",")],
        tol=args.tol,
        a=args.a,
        seed=args.seed,
        depth=None if args.depth == "auto" else int(args.depth),
        p=args.p,
        dim=args.dim,
        oracle_cap=args.oracle_cap,
        diagnostics=args.diagnostics,
        parallel_instances=args.parallel_instances,
    )
    _emit_results(run_benchmark(cfg), args.out)
    return 0


def _cmd_rankstudy(args) -> int:
    rows = []
    for n in (int(s) for s in args.sizes.split(",")):
        rep = schur_rank_experiment(
            args.kernel,
            args.dim,
            n,
            seed=args.seed,
            arrangement=args.arrangement,
        )
        rows.append(rep.as_row())
    cols = ["kernel", "dim", "n", "neighbor_rank", "interaction_rank", "schur_rank"]
    text = ",".join(cols) + "\n"
    for row in rows:
        text += ",".join(str(row[c]) for c in cols) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return 0


def _cmd_verify(args) -> int:
    kernel = make_kernel(args.kernel, a=args.a)
    depth = None if args.depth == "auto" else int(args.depth)
    depth = depth or default_depth(args.n, args.dim)
    ps = generate_balanced_points(args.n, args.dim, depth, seed=args.seed)
    tree = compute_lists(build_tree(ps, depth))
    store = init_operators(tree, kernel, p=args.p, tol=args.tol)
    rng = np.random.default_rng(args.seed)
    x_exact = rng.uniform(-1.0, 1.0, args.n)
    b = dense_matvec(kernel, ps, x_exact)
    fact = factorize(store, tree, tol=args.tol)
    x = solve(fact, b)
    x_ref = dense_solve(DenseSystem(assemble_dense(kernel, ps), b))
    err_exact = np.linalg.norm(x - x_exact) / np.linalg.norm(x_exact)
    err_lu = np.linalg.norm(x - x_ref) / np.linalg.norm(x_ref)
    print(f"n={args.n} kernel={args.kernel} depth={depth} tol={args.tol:g}")
    print(f"rel l2 error vs manufactured solution: {err_exact:.3e}")
    print(f"rel l2 error vs dense full-pivot LU:   {err_lu:.3e}")
    print(f"max compressed rank r_m: {fact.r_m}")
    return 0


def _cmd_dump_extended(args) -> int:
    kernel = make_kernel(args.kernel, a=args.a)
    depth = None if args.depth == "auto" else int(args.depth)
    depth = depth or default_depth(args.n, args.dim)
    ps = generate_balanced_points(args.n, args.dim, depth, seed=args.seed)
    tree = compute_lists(build_tree(ps, depth))
    store = init_operators(tree, kernel, p=args.p, tol=args.tol)
    dump_extended(store, tree, args.out, cap=args.cap)
    print(f"wrote extended pattern to {args.out}")
    return 0


def _common_system_args(sub):
    sub.add_argument("--kernel", default="log", choices=KERNEL_NAMES)
    sub.add_argument("--tol", type=float, default=1e-14)
    sub.add_argument("--a", type=float, default=0.001)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--depth", default="auto")
    sub.add_argument("--p", type=int, default=8)
    sub.add_argument("--dim", type=int, default=2, choices=(1, 2, 3))


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="ifmm", description="fast direct solver benchmarks and checks"
    )
    subs = parser.add_subparsers(dest="command", required=True)

    b = subs.add_parser("bench", help="scaling benchmark")
    _common_system_args(b)
    b.add_argument("--sizes", required=True, help="comma-separated point counts")
    b.add_argument("--oracle-cap", type=int, default=20000)
    b.add_argument("--out", default=None, help="output .csv or .json path")
    b.add_argument("--diagnostics", action="store_true")
    b.add_argument("--parallel-instances", type=int, default=1)
    b.set_defaults(func=_cmd_bench)

    r = subs.add_parser("rankstudy", help="three-cluster rank experiments")
    r.add_argument("--kernel", default="log", choices=KERNEL_NAMES)
    r.add_argument("--dim", type=int, default=1, choices=(1, 2))
    r.add_argument("--sizes", required=True)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--arrangement", default="strip", choices=("strip", "diagonal"))
    r.add_argument("--out", default=None)
    r.set_defaults(func=_cmd_rankstudy)

    v = subs.add_parser("verify", help="compare against the dense reference")
    _common_system_args(v)
    v.add_argument("--n", type=int, required=True)
    v.set_defaults(func=_cmd_verify)

    d = subs.add_parser("dump-extended", help="write extended-system triplets")
    _common_system_args(d)
    d.add_argument("--n", type=int, required=True)
    d.add_argument("--cap", type=int, default=4096)
    d.add_argument("--out", default="extended.txt")
    d.set_defaults(func=_cmd_dump_extended)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
