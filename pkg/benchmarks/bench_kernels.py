"""Time the numba and numpy flavours of each hot kernel.

    python3 benchmarks/bench_kernels.py [--repeat 20]

The first numba call (compilation, or loading the on-disk cache) is made
before timing. Sizes mirror the live pipeline: a few boxes per camera for
IoU, and 17 joints seen by four cameras for triangulation, plus one larger
batch for each.
"""
from __future__ import annotations

import argparse
import timeit

import numpy as np

from caveloco.geometry import default_cameras, project_points
from caveloco.kernels import (
    iou_matrix_numba,
    iou_matrix_numpy,
    triangulate_batch_numba,
    triangulate_batch_numpy,
)


def iou_case(n, rng):
    def boxes():
        xy = rng.uniform(0, 1800, (n, 2))
        return np.hstack([xy, xy + rng.uniform(20, 300, (n, 2))])
    return boxes(), boxes()


def tri_case(n, rng):
    cams = default_cameras()
    X = rng.uniform([-1.5, -1.5, 0.1], [1.5, 1.5, 2.0], (n, 3))
    uv = np.stack([project_points(c, X)[0] for c in cams], axis=1) + rng.normal(0, 0.5, (n, 4, 2))
    return np.stack([c.projection_matrix for c in cams]), uv, np.ones((n, 4))


def bench(fn, args, repeat):
    fn(*args)
    loops = max(1, int(0.05 / max(min(timeit.repeat(lambda: fn(*args), number=1, repeat=3)), 1e-7)))
    best = min(timeit.repeat(lambda: fn(*args), number=loops, repeat=repeat)) / loops
    return best * 1e6


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    cases = [
        ("iou 4x4", iou_matrix_numpy, iou_matrix_numba, iou_case(4, rng)),
        ("iou 64x64", iou_matrix_numpy, iou_matrix_numba, iou_case(64, rng)),
        ("triangulate 17x4", triangulate_batch_numpy, triangulate_batch_numba, tri_case(17, rng)),
        ("triangulate 2000x4", triangulate_batch_numpy, triangulate_batch_numba, tri_case(2000, rng)),
    ]
    print(f"{'kernel':<20} {'numpy us':>10} {'numba us':>10} {'speedup':>8}")
    for name, f_np, f_nb, a in cases:
        t_np, t_nb = bench(f_np, a, args.repeat), bench(f_nb, a, args.repeat)
        print(f"{name:<20} {t_np:>10.1f} {t_nb:>10.1f} {t_np / t_nb:>7.1f}x")


if __name__ == "__main__":
    main()
