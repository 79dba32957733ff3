"""Benchmark the compiled conv kernels against the numpy fallback.

Runs forward and both backward kernels on the conv shapes the network
actually uses (encoder stem at full resolution, pooled encoder stages,
fusion and decoder convs on the stride-8 grid) and prints per-shape
timings plus the speedup of the compiled extension.

Usage: python3 benchmarks/bench_kernels.py [--repeats N] [--image-size S]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from simprop.kernels import pyref

try:
    from simprop.kernels import _convkern as compiled
except ImportError:
    compiled = None


def model_shapes(image_size: int, c: int) -> list[tuple[str, tuple, tuple, int, int]]:
    """(label, x_shape, w_shape, stride, dilation) for the network's convs."""
    s = image_size
    return [
        (f"encoder stem 3->{c} k3 {s}x{s}", (3, s, s), (c, 3, 3, 3), 1, 1),
        (f"encoder {c}->{c} k3 {s // 2}x{s // 2}", (c, s // 2, s // 2), (c, c, 3, 3), 1, 1),
        (f"encoder {c}->{c} k3 {s // 4}x{s // 4}", (c, s // 4, s // 4), (c, c, 3, 3), 1, 1),
        (f"encoder dil2 {c}->{c} k3 {s // 8}x{s // 8}", (c, s // 8, s // 8), (c, c, 3, 3), 1, 2),
        (f"fusion {2 * c}->{2 * c} k3 {s // 8}x{s // 8}",
         (2 * c, s // 8, s // 8), (2 * c, 2 * c, 3, 3), 1, 1),
        (f"aspp dil4 {2 * c}->{c} k3 {s // 8}x{s // 8}",
         (2 * c, s // 8, s // 8), (c, 2 * c, 3, 3), 1, 4),
        (f"decoder 1x1 {c}->2 {s // 8}x{s // 8}", (c, s // 8, s // 8), (2, c, 1, 1), 1, 1),
    ]


def time_case(impl, x, w, stride, dilation, padding, repeats: int) -> float:
    y = impl.conv2d_forward(x, w, stride, dilation, padding)
    gy = np.ones_like(y)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        impl.conv2d_forward(x, w, stride, dilation, padding)
        impl.conv2d_backward_input(gy, w, x.shape, stride, dilation, padding)
        impl.conv2d_backward_weight(gy, x, w.shape, stride, dilation, padding)
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--image-size", type=int, default=64)
    ap.add_argument("--channels", type=int, default=64)
    args = ap.parse_args()

    if compiled is None:
        print("compiled extension not built; benchmarking python backend only")

    rng = np.random.default_rng(0)
    rows = []
    for label, x_shape, w_shape, stride, dilation in model_shapes(
        args.image_size, args.channels
    ):
        padding = dilation * (w_shape[2] - 1) // 2
        x = rng.standard_normal(x_shape, dtype=np.float32)
        w = rng.standard_normal(w_shape, dtype=np.float32)
        t_py = time_case(pyref, x, w, stride, dilation, padding, args.repeats)
        if compiled is not None:
            t_c = time_case(compiled, x, w, stride, dilation, padding, args.repeats)
            rows.append((label, t_py, t_c))
        else:
            rows.append((label, t_py, None))

    width = max(len(r[0]) for r in rows)
    print(f"{'shape':<{width}}  {'python':>10}  {'compiled':>10}  {'speedup':>8}")
    total_py = total_c = 0.0
    for label, t_py, t_c in rows:
        total_py += t_py
        if t_c is None:
            print(f"{label:<{width}}  {t_py * 1e3:>8.2f}ms  {'-':>10}  {'-':>8}")
        else:
            total_c += t_c
            print(
                f"{label:<{width}}  {t_py * 1e3:>8.2f}ms  {t_c * 1e3:>8.2f}ms"
                f"  {t_py / t_c:>7.1f}x"
            )
    if compiled is not None:
        print(
            f"{'total':<{width}}  {total_py * 1e3:>8.2f}ms  {total_c * 1e3:>8.2f}ms"
            f"  {total_py / total_c:>7.1f}x"
        )
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
