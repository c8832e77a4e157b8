"""Time the numba kernels against their numpy twins.

    python benchmarks/bench_kernels.py [--repeat 20]

Both paths are imported directly, so the CROSSVIEW_NUMBA flag does not matter
here. The first jitted call is made before timing to keep compilation out of
the numbers.
"""
import argparse
import timeit

import numpy as np

from crossview import kernels


def cases(rng):
    cost = rng.random((7, 7))
    big = rng.random((60, 80))
    hull = kernels.convex_hull(rng.uniform(10, 150, size=(8, 2)))
    masks = (rng.random((7, 168, 168)) < 0.3).astype(np.uint8)
    depths = rng.uniform(1, 5, size=7)
    pts = rng.normal(size=(400, 64))
    cents = rng.normal(size=(10, 64))
    return [
        ("hungarian 7x7", kernels._hungarian_loop, kernels._hungarian_np, (cost,)),
        ("hungarian 60x80", kernels._hungarian_loop, kernels._hungarian_np, (big,)),
        ("greedy 60x80", kernels._greedy_loop, kernels._greedy_np, (big,)),
        ("raster 168x168", kernels._raster_loop, kernels._raster_np, (hull, 168, 168)),
        ("zbuffer 7x168x168", kernels._zbuffer_loop, kernels._zbuffer_np, (masks, depths)),
        ("assign 400x10x64", kernels._assign_loop, kernels._assign_np, (pts, cents)),
    ]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(args.seed)
    print(f"{'kernel':<22}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  same")
    for name, jit_fn, np_fn, call in cases(rng):
        a, b = jit_fn(*call), np_fn(*call)
        a, b = (a, b) if isinstance(a, tuple) else ((a,), (b,))
        # float outputs may differ in the last bits because the summation order differs
        same = all(np.allclose(x, y, rtol=1e-12, atol=1e-12) for x, y in zip(a, b))
        tj = min(timeit.repeat(lambda: jit_fn(*call), number=1, repeat=args.repeat)) * 1e3
        tn = min(timeit.repeat(lambda: np_fn(*call), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<22}{tj:>10.3f}{tn:>10.3f}{tn / tj:>8.1f}x  {same}")


if __name__ == "__main__":
    main()
