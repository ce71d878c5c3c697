"""Benchmark the numpy and numba kernel backends on the shapes the
networks actually use.  Run:  python3 benchmarks/bench_kernels.py
"""

import time

import numpy as np

from pibconv.engine import backend


def _time(fn, *args, repeat=5, warmup=2):
    for _ in range(warmup):
        fn(*args)
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


CASES = [
    # (label, N, C, H, K, depthwise)
    ("depthwise 3x3 c36 32px", 96, 36, 32, 3, True),
    ("depthwise 5x5 c72 16px", 96, 72, 16, 5, True),
    ("depthwise 7x7 c144 8px", 96, 144, 8, 7, True),
    ("pointwise 1x1 c144 8px", 96, 144, 8, 1, False),
    ("dense 3x3 c64 16px", 32, 64, 16, 3, False),
]


def bench_conv(kern, n, c, h, k, depthwise):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, c, h, h)).astype(np.float32)
    groups = c if depthwise else 1
    w = rng.standard_normal((c, 1 if depthwise else c, k, k)).astype(np.float32)
    pad = (k - 1) // 2
    t_f = _time(kern.conv2d_fwd, x, w, 1, 1, pad, pad, 1, 1, groups)
    y = kern.conv2d_fwd(x, w, 1, 1, pad, pad, 1, 1, groups)
    t_bx = _time(kern.conv2d_bwd_x, y, w, x.shape, 1, 1, pad, pad, 1, 1, groups)
    t_bw = _time(kern.conv2d_bwd_w, y, x, w.shape, 1, 1, pad, pad, 1, 1, groups)
    return t_f, t_bx, t_bw


def bench_maxpool(kern, n=96, c=64, h=32):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, c, h, h)).astype(np.float32)
    y, ctx = kern.maxpool3_fwd(x, 1)
    t_f = _time(lambda: kern.maxpool3_fwd(x, 1))
    t_b = _time(lambda: kern.maxpool3_bwd(y, x, y, ctx, 1))
    return t_f, t_b


def main():
    backends = {}
    with backend.use_backend("numpy"):
        backends["numpy"] = backend.kernels()
    try:
        with backend.use_backend("numba"):
            backends["numba"] = backend.kernels()
    except ImportError:
        print("numba unavailable; benchmarking numpy only")

    print(f"{'case':28s}  " + "  ".join(f"{n:>26s}" for n in backends))
    print(f"{'':28s}  " + "  ".join(f"{'fwd/bwd_x/bwd_w (ms)':>26s}" for _ in backends))
    for label, n, c, h, k, dw in CASES:
        row = [f"{label:28s}"]
        for kern in backends.values():
            tf, tbx, tbw = bench_conv(kern, n, c, h, k, dw)
            row.append(f"{tf * 1e3:7.2f}/{tbx * 1e3:7.2f}/{tbw * 1e3:7.2f}  ")
        print("  ".join(row))
    row = [f"{'maxpool3 c64 32px':28s}"]
    for kern in backends.values():
        tf, tb = bench_maxpool(kern)
        row.append(f"{tf * 1e3:7.2f}/{tb * 1e3:7.2f}/{'-':>7s}  ")
    print("  ".join(row))

    if "numba" in backends:
        print("\nagreement check (same inputs, both backends):")
        rng = np.random.default_rng(1)
        x = rng.standard_normal((4, 16, 12, 12)).astype(np.float32)
        w = rng.standard_normal((16, 1, 3, 3)).astype(np.float32)
        a = backends["numpy"].conv2d_fwd(x, w, 1, 1, 1, 1, 1, 1, 16)
        b = backends["numba"].conv2d_fwd(x, w, 1, 1, 1, 1, 1, 1, 16)
        print(f"  depthwise fwd max |diff| = {np.abs(a - b).max():.3g}")


if __name__ == "__main__":
    main()
