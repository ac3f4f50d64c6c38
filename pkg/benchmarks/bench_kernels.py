"""Benchmark the numba kernels against the pure-numpy fallback lane.

Runs each hot kernel on a fixed mid-size workload under both backends via
accel.forced, reports median wall time and speedup, and cross-checks that
the two lanes agree on the benchmark inputs.

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--scale X]
"""

import argparse
import time

import numpy as np

from panosplat import accel
from panosplat.cubemap_render import (
    RenderConfig,
    faces_to_onehot,
    render_cubemap,
    semantic_loss_grad,
)
from panosplat.gaussian_core import GaussianSet
from panosplat.nn_kernels import SparseGrid, submanifold_conv3d
from panosplat.pano_geometry import ErpGrid
from panosplat.sampling import chamfer, fps


def random_scene(n, k, res, seed=0):
    rng = np.random.default_rng(seed)
    direc = rng.normal(size=(n, 3))
    direc /= np.linalg.norm(direc, axis=1, keepdims=True)
    cat = rng.uniform(0.2, 1.0, size=(n, k))
    cat /= cat.sum(axis=1, keepdims=True)
    gs = GaussianSet(
        centers=direc * rng.uniform(1.5, 2.5, size=(n, 1)),
        radii=rng.uniform(0.2, 0.45, size=(n, 3)),
        euler=rng.uniform(-np.pi, np.pi, size=(n, 3)),
        opacity=rng.uniform(0.3, 0.85, size=n),
        category=cat,
        features=np.zeros((n, 4)),
        grid=ErpGrid(16, 32),
        stride=4,
        r_max=0.5,
    )
    labels = rng.integers(0, k, size=(6, res, res))
    target = faces_to_onehot(labels, k)
    return gs, target, RenderConfig(resolution=res)


def build_workloads(scale):
    rng = np.random.default_rng(1)
    gs, target, config = random_scene(int(64 * scale), 8, 64)

    m = int(4000 * scale)
    coords = rng.integers(0, 32, size=(3 * m, 3))
    coords = np.unique(coords, axis=0)[:m]
    grid = SparseGrid(coords, rng.normal(size=(len(coords), 16)))
    kernel = rng.normal(size=(3, 3, 3, 16, 16))
    bias = rng.normal(size=16)

    cloud = rng.normal(size=(int(20000 * scale), 3))
    other = rng.normal(size=(int(15000 * scale), 3)) + 0.25

    return {
        "render forward": lambda: render_cubemap(gs, config),
        "render gradient": lambda: semantic_loss_grad(gs, target, config),
        "sparse conv3d": lambda: submanifold_conv3d(grid, kernel, bias),
        "fps k=2048": lambda: fps(cloud, int(2048 * scale)),
        "chamfer": lambda: chamfer(cloud, other),
    }


def median_time(fn, repeats):
    fn()  # warm up: numba compiles (or loads its disk cache) on first call
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return sorted(times)[len(times) // 2]


def crosscheck(workloads):
    """Assert lane agreement on the benchmark inputs before timing."""
    for name, fn in workloads.items():
        outs = []
        for backend in ("numpy", "numba"):
            with accel.forced(backend):
                outs.append(fn())
        a, b = outs
        if name == "render forward":
            ok = np.allclose(a.probs, b.probs, atol=1e-12) and np.allclose(
                a.alpha, b.alpha, atol=1e-12
            )
        elif name == "render gradient":
            ok = np.allclose(a.centers, b.centers, atol=1e-12) and a.loss == b.loss
        elif name == "sparse conv3d":
            ok = np.allclose(a.features, b.features, atol=1e-10)
        elif name.startswith("fps"):
            ok = np.array_equal(a, b)
        else:
            ok = a == b
        status = "ok" if ok else "MISMATCH"
        print(f"  crosscheck {name}: {status}")
        if not ok:
            raise SystemExit(f"lane disagreement in {name}")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--scale", type=float, default=1.0,
                        help="scale workload sizes (default 1.0)")
    args = parser.parse_args()

    if not accel.numba_available():
        raise SystemExit("numba is not installed; nothing to compare")

    workloads = build_workloads(args.scale)
    print("cross-checking lanes on benchmark inputs")
    crosscheck(workloads)

    print(f"\n{'kernel':<18} {'numpy':>10} {'numba':>10} {'speedup':>9}")
    for name, fn in workloads.items():
        row = {}
        for backend in ("numpy", "numba"):
            with accel.forced(backend):
                row[backend] = median_time(fn, args.repeats)
        ratio = row["numpy"] / row["numba"] if row["numba"] > 0 else float("inf")
        print(f"{name:<18} {row['numpy'] * 1e3:>8.1f}ms {row['numba'] * 1e3:>8.1f}ms "
              f"{ratio:>8.1f}x")


if __name__ == "__main__":
    main()
