"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_backends.py [--size 128] [--gaussians 5000] [--repeat 3]

Both backends render the same random scene; the script checks that the images
agree and reports the median wall time of forward, backward and ray-march
calls for each backend.
"""
import argparse
import statistics
import time

import numpy as np

from skinsplat import render as rnd
from skinsplat.cli import bench_scene


def _median_time(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=128)
    ap.add_argument("--gaussians", type=int, default=5000)
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--oracle-size", type=int, default=32)
    args = ap.parse_args(argv)

    posed, cam, extent = bench_scene(args.gaussians, args.size, seed=0)
    _, small_cam, _ = bench_scene(args.gaussians, args.oracle_size, seed=0)
    grad = np.random.default_rng(1).normal(size=(cam.height, cam.width, 3))
    backends = ["python"] + (["compiled"] if rnd.BACKEND == "compiled" else [])
    images, rows = {}, []
    for name in backends:
        out = rnd.render_splat(posed, cam, backend=name, dtype=np.float64)
        images[name] = out.color
        fwd = _median_time(lambda: rnd.render_splat(posed, cam, backend=name), args.repeat)
        bwd = _median_time(lambda: rnd.render_splat_backward(posed, cam, (0, 0, 0), grad, forward=out, backend=name), args.repeat)
        ray = _median_time(
            lambda: rnd.render_raymarch_oracle(posed, small_cam, step=extent / 256, backend=name), max(1, args.repeat // 2)
        )
        rows.append((name, fwd, bwd, ray))

    print(f"scene: {args.gaussians} Gaussians, splat {args.size}x{args.size}, oracle {args.oracle_size}x{args.oracle_size}")
    print(f"{'backend':<10}{'forward_ms':>12}{'backward_ms':>13}{'raymarch_ms':>13}")
    for name, fwd, bwd, ray in rows:
        print(f"{name:<10}{fwd * 1e3:>12.2f}{bwd * 1e3:>13.2f}{ray * 1e3:>13.2f}")
    if len(rows) == 2:
        (_, pf, pb, pr), (_, cf, cb, cr) = rows
        print(f"speedup   {pf / cf:>12.1f}x{pb / cb:>12.1f}x{pr / cr:>12.1f}x")
        diff = np.abs(images["python"] - images["compiled"]).max()
        print(f"max |python - compiled| = {diff:.3g}")
    else:
        print("compiled kernels unavailable; only the fallback was timed")


if __name__ == "__main__":
    main()
