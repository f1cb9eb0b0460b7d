"""Benchmark the numba kernels against their pure-numpy twins.

Run with the default backend, then with KINEDIFF_NO_NUMBA=1 to confirm the
fallback path; this script always times both implementations directly.

    python scripts/bench_kernels.py [--repeats 50]
"""

import argparse
import time

import numpy as np

from kinediff import _kernels as K


def timeit(fn, repeats):
    fn()  # warm (numba compiles lazily)
    best = float("inf")
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(repeats):
            fn()
        best = min(best, (time.perf_counter() - t0) / repeats)
    return best * 1e3


def bench_conv(rng, repeats, b, ci, t, co, kk, stride, pad):
    x = rng.standard_normal((b, ci, t)).astype(np.float32)
    w = rng.standard_normal((co, ci, kk)).astype(np.float32)
    gy = np.ascontiguousarray(
        rng.standard_normal(K.conv1d_fwd_numpy(x, w, stride, pad).shape)
    ).astype(np.float32)
    rows = []
    pairs = [
        ("conv1d_fwd", lambda f: f(x, w, stride, pad),
         K.conv1d_fwd_numba, K.conv1d_fwd_numpy),
        ("conv1d_bwd_w", lambda f: f(gy, x, kk, stride, pad),
         K.conv1d_bwd_w_numba, K.conv1d_bwd_w_numpy),
        ("conv1d_bwd_x", lambda f: f(gy, w, t, stride, pad),
         K.conv1d_bwd_x_numba, K.conv1d_bwd_x_numpy),
    ]
    shape = f"B{b} {ci}->{co} T{t} k{kk} s{stride}"
    for name, call, nb, np_ in pairs:
        t_nb = timeit(lambda: call(nb), repeats) if nb else float("nan")
        t_np = timeit(lambda: call(np_), repeats)
        rows.append((f"{name:<14} {shape}", t_nb, t_np))
    return rows


def bench_fk(rng, repeats, m, n):
    axes = np.tile(np.array([0.0, 0.0, 1.0], np.float32), (n, 1))
    offs = np.tile(np.array([0.25, 0.0, 0.0], np.float32), (n, 1))
    rots = np.tile(np.array([1.0, 0.0, 0.0, 0.0], np.float32), (n, 1))
    joints = rng.uniform(-2.9, 2.9, (m, n)).astype(np.float32)
    cot = rng.standard_normal((m, 7)).astype(np.float32)
    _, link_qs = K.fk_fwd_numpy(joints, axes, offs, rots)
    rows = []
    t_nb = timeit(lambda: K.fk_fwd_numba(joints, axes, offs, rots), repeats) \
        if K.fk_fwd_numba else float("nan")
    t_np = timeit(lambda: K.fk_fwd_numpy(joints, axes, offs, rots), repeats)
    rows.append((f"{'fk_fwd':<14} M{m} N{n}", t_nb, t_np))
    t_nb = timeit(lambda: K.fk_bwd_numba(joints, link_qs, axes, offs, rots, cot),
                  repeats) if K.fk_bwd_numba else float("nan")
    t_np = timeit(lambda: K.fk_bwd_numpy(joints, link_qs, axes, offs, rots, cot),
                  repeats)
    rows.append((f"{'fk_bwd':<14} M{m} N{n}", t_nb, t_np))
    return rows


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()
    rng = np.random.default_rng(0)
    print(f"active backend: {K.BACKEND}  (numba available: {K.HAS_NUMBA})\n")
    rows = []
    rows += bench_conv(rng, args.repeats, 16, 64, 64, 64, 5, 1, 2)
    rows += bench_conv(rng, args.repeats, 16, 128, 16, 128, 5, 1, 2)
    rows += bench_conv(rng, args.repeats, 1, 32, 64, 32, 3, 2, 1)
    rows += bench_fk(rng, args.repeats, 64, 4)
    rows += bench_fk(rng, args.repeats, 2048, 7)
    print(f"{'kernel / shape':<40} {'numba ms':>10} {'numpy ms':>10} {'ratio':>7}")
    for name, t_nb, t_np in rows:
        ratio = t_np / t_nb if t_nb == t_nb and t_nb > 0 else float("nan")
        print(f"{name:<40} {t_nb:>10.3f} {t_np:>10.3f} {ratio:>6.2f}x")


if __name__ == "__main__":
    main()
