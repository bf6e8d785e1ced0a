"""Benchmark the interpolation sampling kernels.

Compares three implementations of the gather-and-lerp forward and its
scatter-add adjoint on one proposal grid:

  compiled   Cython extension (marn.kernels._core), if built
  numpy      pure-numpy fallback (marn.kernels._reference)
  dense      materialized (T*S*N, T) matrix product, the naive baseline

Both sparse backends are checked against the dense product before timing.

Usage:
  python benchmarks/bench_sampling.py --preset large --repeats 50
  python benchmarks/bench_sampling.py --t 64 --n-scales 16 --dim 256
"""

import argparse
import time

import numpy as np

from marn.kernels import _reference
from marn.sampling import ProposalGrid, build_sampling_map

try:
    from marn.kernels import _core
except ImportError:
    _core = None

PRESETS = {
    "small": dict(T=32, scales=(6, 7, 8, 10, 11, 12), stride_rule="dense"),
    "large": dict(T=128, scales=tuple(range(1, 65)), stride_rule="sparse_quarter"),
}


def build_grid(args) -> ProposalGrid:
    if args.preset:
        spec = PRESETS[args.preset]
        return ProposalGrid(spec["T"], spec["scales"], args.n, spec["stride_rule"])
    scales = tuple(range(2, 2 + args.n_scales))
    return ProposalGrid(args.t, scales, args.n, args.stride_rule)


def best_of(fn, repeats: int, warmup: int = 3) -> float:
    """Best wall time in seconds over `repeats` calls after warmup."""
    for _ in range(warmup):
        fn()
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--preset", choices=sorted(PRESETS),
                        help="named grid; overrides --t/--n-scales/--stride-rule")
    parser.add_argument("--t", type=int, default=64, help="temporal units")
    parser.add_argument("--n-scales", type=int, default=16, help="number of scales")
    parser.add_argument("--stride-rule", default="dense",
                        choices=("dense", "sparse_quarter"))
    parser.add_argument("--n", type=int, default=4, help="sample points per proposal")
    parser.add_argument("--dim", type=int, default=512, help="feature dimension")
    parser.add_argument("--repeats", type=int, default=30)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    grid = build_grid(args)
    smap = build_sampling_map(grid)
    rng = np.random.default_rng(args.seed)
    features = rng.normal(size=(grid.T, args.dim))
    n_points = grid.T * grid.S * grid.N
    grad_out = rng.normal(size=(n_points, args.dim))
    dense_w = smap.dense().reshape(n_points, grid.T)

    print(f"grid: T={grid.T} S={grid.S} N={grid.N} stride={grid.stride_rule} "
          f"({grid.n_valid()} valid cells), dim={args.dim}, "
          f"{n_points} sample points, repeats={args.repeats}")

    backends = [("numpy", _reference)]
    if _core is not None:
        backends.insert(0, ("compiled", _core))
    else:
        print("compiled extension unavailable (not built, or MARN_NO_EXT set); "
              "timing fallback and dense only")

    reference_fwd = dense_w @ features
    reference_bwd = dense_w.T @ grad_out
    rows = []
    for name, mod in backends:
        fwd = mod.sample_rows(features, smap.idx_lo, smap.idx_hi, smap.w_lo, smap.w_hi)
        bwd = mod.sample_rows_grad(grad_out, smap.idx_lo, smap.idx_hi,
                                   smap.w_lo, smap.w_hi, grid.T)
        fwd_err = float(np.abs(fwd - reference_fwd).max())
        bwd_err = float(np.abs(bwd - reference_bwd).max())
        if fwd_err > 1e-9 or bwd_err > 1e-9:
            print(f"FAIL {name}: forward err {fwd_err:.3g}, backward err {bwd_err:.3g}")
            return 1
        t_fwd = best_of(lambda m=mod: m.sample_rows(
            features, smap.idx_lo, smap.idx_hi, smap.w_lo, smap.w_hi), args.repeats)
        t_bwd = best_of(lambda m=mod: m.sample_rows_grad(
            grad_out, smap.idx_lo, smap.idx_hi, smap.w_lo, smap.w_hi, grid.T),
            args.repeats)
        rows.append((name, t_fwd, t_bwd))
    rows.append((
        "dense",
        best_of(lambda: dense_w @ features, args.repeats),
        best_of(lambda: dense_w.T @ grad_out, args.repeats),
    ))

    base_fwd = dict((name, t) for name, t, _ in rows)["numpy"]
    base_bwd = dict((name, t) for name, _, t in rows)["numpy"]
    print(f"{'backend':<10} {'forward ms':>12} {'backward ms':>12} "
          f"{'fwd vs numpy':>14} {'bwd vs numpy':>14}")
    for name, t_fwd, t_bwd in rows:
        print(f"{name:<10} {t_fwd * 1e3:>12.4f} {t_bwd * 1e3:>12.4f} "
              f"{base_fwd / t_fwd:>13.2f}x {base_bwd / t_bwd:>13.2f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
