"""Timing comparison of the two kernel backends.

Runs each hot kernel through the compiled-loop implementation and the
pure-numpy fallback on identical inputs, checks they agree, and prints
per-call times.  Shapes cover the small training configuration and the
full-size defaults.

    python benchmarks/bench_kernels.py [--repeat 30]
"""

import argparse
import time

import numpy as np

from panonav.kernels import numba_backend, numpy_backend


def timeit(fn, repeat):
    fn()                      # warm up (and JIT-compile)
    t0 = time.perf_counter()
    for _ in range(repeat):
        out = fn()
    return (time.perf_counter() - t0) / repeat, out


def bench_raycast(label, n_agents, n_rays, n_spheres, repeat):
    rng = np.random.default_rng(0)
    origins = rng.uniform(-5, 5, (n_agents, 3)) + [0, 0, 3]
    frames = np.tile(np.eye(3), (n_agents, 1, 1))
    dirs = rng.standard_normal((n_rays, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    spheres = np.column_stack([rng.uniform(-8, 8, (n_spheres, 3)),
                               rng.uniform(0.2, 1.0, n_spheres)])
    skip = np.full(n_agents, -1, dtype=np.int64)
    args = (origins, frames, dirs, spheres, skip, 0.0, True, 100.0)
    t_nb, out_nb = timeit(lambda: numba_backend.raycast_scene(*args), repeat)
    t_np, out_np = timeit(lambda: numpy_backend.raycast_scene(*args), repeat)
    err = float(np.abs(out_nb - out_np).max())
    row(label, t_nb, t_np, err)


def bench_conv(label, b, c_in, h, w, c_out, k, stride, repeat):
    rng = np.random.default_rng(1)
    hp, wp = h + 2 * (k // 2), w + 2 * (k // 2)
    xp = rng.standard_normal((b, c_in, hp, wp))
    wgt = rng.standard_normal((c_out, c_in, k, k))
    bias = rng.standard_normal(c_out)
    t_nb, y_nb = timeit(
        lambda: numba_backend.conv2d_forward(xp, wgt, bias, *stride), repeat)
    t_np, y_np = timeit(
        lambda: numpy_backend.conv2d_forward(xp, wgt, bias, *stride), repeat)
    row(label + " fwd", t_nb, t_np, float(np.abs(y_nb - y_np).max()))

    gy = rng.standard_normal(y_nb.shape)
    t_nb, g_nb = timeit(
        lambda: numba_backend.conv2d_backward_weight(xp, gy, k, k, *stride),
        repeat)
    t_np, g_np = timeit(
        lambda: numpy_backend.conv2d_backward_weight(xp, gy, k, k, *stride),
        repeat)
    row(label + " bww", t_nb, t_np, float(np.abs(g_nb - g_np).max()))

    t_nb, gx_nb = timeit(
        lambda: numba_backend.conv2d_backward_input(wgt, gy, hp, wp, *stride),
        repeat)
    t_np, gx_np = timeit(
        lambda: numpy_backend.conv2d_backward_input(wgt, gy, hp, wp, *stride),
        repeat)
    row(label + " bwi", t_nb, t_np, float(np.abs(gx_nb - gx_np).max()))


def row(label, t_nb, t_np, err):
    print(f"{label:26s} numba {t_nb * 1e3:8.3f} ms   "
          f"numpy {t_np * 1e3:8.3f} ms   x{t_np / t_nb:5.2f}   "
          f"max|diff| {err:.2e}")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeat", type=int, default=30)
    args = ap.parse_args()
    print(f"{'kernel':26s} {'compiled':>14s}   {'fallback':>14s}")
    bench_raycast("raycast small (8x2.3k)", 8, 24 * 24 * 4, 20, args.repeat)
    bench_raycast("raycast full (8x16k)", 8, 64 * 64 * 4, 40,
                  max(args.repeat // 3, 3))
    bench_conv("conv small (32,8,8x24)", 32, 8, 8, 24, 16, 3, (2, 2),
               args.repeat)
    bench_conv("conv full (32,16,16x64)", 32, 16, 16, 64, 32, 3, (2, 2),
               max(args.repeat // 3, 3))


if __name__ == "__main__":
    main()
