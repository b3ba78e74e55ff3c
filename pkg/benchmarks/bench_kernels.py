"""Time the compiled and pure-Python kernels on identical inputs.

Run from the repository root after installing the package:

    python3 benchmarks/bench_kernels.py [--rays 2000] [--points 300] [--repeat 3]

Prints one line per kernel and backend with the best wall time, the speedup
over the Python fallback and the largest disagreement between backends.
"""

import argparse
import time

import numpy as np

from terranav import kernels
from terranav.flow import KernelWindow, image_gradients
from terranav.terrain import TerrainSpec, generate_synthetic_dtm


def _best_of(fn, repeat):
    best = np.inf
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def ray_inputs(n, rng):
    dtm = generate_synthetic_dtm(TerrainSpec(kind="fractal", amplitude=200.0, seed=3,
                                             width=201, height=201, cell_size=20.0, base=300.0))
    centre = np.array([dtm.x_max / 2, dtm.y_max / 2])
    origins = np.column_stack([centre + rng.uniform(-800, 800, (n, 2)), np.full(n, 1000.0)])
    dirs = np.column_stack([rng.uniform(-0.5, 0.5, (n, 2)), -np.ones(n)])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    args = (dtm.elevations, dtm.origin_x, dtm.origin_y, dtm.cell_size, origins, dirs,
            1e-4 * dtm.cell_size)
    return args


def track_inputs(n, rng, size=480):
    y, x = np.mgrid[0:size, 0:size].astype(np.float64)
    img1 = np.zeros((size, size))
    for _ in range(12):
        kx, ky = rng.uniform(0.02, 0.15, 2)
        img1 += np.sin(kx * x + ky * y + rng.uniform(0, 2 * np.pi))
    img1 = (img1 - img1.min()) / np.ptp(img1)
    # second frame: the texture moved by (+3, -2) pixels
    img2 = np.roll(np.roll(img1, 3, axis=1), -2, axis=0)
    gx, gy = image_gradients(img1)
    window = KernelWindow(7)
    pts = rng.uniform(40, size - 40, (n, 2))
    guess = np.zeros_like(pts)
    return (img1, img2, gx, gy, pts, guess, window.weights, window.radius, 30, 0.01, 1e-6)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--rays", type=int, default=2000)
    ap.add_argument("--points", type=int, default=300)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    found = kernels.backends()
    if "cython" not in found:
        print("compiled backend not built; only the Python fallback is available")
    rng = np.random.default_rng(42)
    ray_args = ray_inputs(args.rays, rng)
    track_args = track_inputs(args.points, rng)

    print(f"{'kernel':<12}{'backend':<9}{'best s':>10}{'speedup':>10}{'max diff':>12}")
    for name, call, a in (("cast_rays", "cast_rays", ray_args),
                          ("track_level", "track_level", track_args)):
        results = {}
        for backend, mod in found.items():
            results[backend] = _best_of(lambda m=mod: getattr(m, call)(*a), args.repeat)
        t_py = results["python"][0]
        ref = results["python"][1][0]
        for backend, (t, out) in results.items():
            diff = np.nanmax(np.abs(out[0] - ref)) if np.any(np.isfinite(ref)) else 0.0
            print(f"{name:<12}{backend:<9}{t:>10.4f}{t_py / t:>9.1f}x{diff:>12.2e}")


if __name__ == "__main__":
    main()
