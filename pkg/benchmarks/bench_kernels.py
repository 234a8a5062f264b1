"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat 5]

Numba compile time is excluded (one warm-up call per kernel).
"""
import argparse
import time

import numpy as np

from recontrack import kernels
from recontrack.geometry import planar_rotation


def best_of(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    P = rng.normal(size=(1500, 3))
    yield "lof n=1500 k=4", lambda: kernels.lof_numba(P, 4, 1e-9), lambda: kernels.lof_numpy(P, 4, 1e-9)
    big = rng.normal(size=(12000, 3))
    yield "lof n=12000 k=4 (tree)", lambda: kernels.lof_tree(big, 4, 1e-9), None

    mask = rng.random((375, 1242)) < 0.1
    flow = rng.normal(0, 3, (375, 1242, 2))
    yield "warp 1242x375", lambda: kernels.warp_mask_numba(mask, flow), lambda: kernels.warp_mask_numpy(mask, flow)

    B = 4
    centers = np.column_stack([rng.uniform(-4, 4, B), np.zeros(B), rng.uniform(6, 20, B)])
    rots = np.stack([planar_rotation(a) for a in rng.uniform(-3, 3, B)])
    halves = rng.uniform(0.5, 2.0, (B, 3))
    vs, us = np.mgrid[0:120, 0:320].astype(float)
    dirs = np.stack([(us - 160) / 160, (vs - 60) / 160, np.ones_like(us)], axis=-1)
    o = np.zeros(3)
    yield (
        "raycast 320x120 x4 boxes",
        lambda: kernels.raycast_boxes_numba(o, dirs, centers, rots, halves),
        lambda: kernels.raycast_boxes_numpy(o, dirs, centers, rots, halves),
    )


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s}{'numba ms':>12s}{'numpy ms':>12s}{'speedup':>10s}")
    for name, fast, slow in cases(rng):
        a = best_of(fast, args.repeat) * 1e3
        if slow is None:
            print(f"{name:28s}{a:12.2f}{'-':>12s}{'-':>10s}")
            continue
        b = best_of(slow, args.repeat) * 1e3
        print(f"{name:28s}{a:12.2f}{b:12.2f}{b / a:10.1f}")


if __name__ == "__main__":
    main()
