"""Time the numba and numpy convolution backends on network-shaped layers.

    python benchmarks/bench_conv.py [--repeat 20] [--batch 8] [--size 32]

Each backend is warmed up once (JIT compile for numba) before timing.
"""

import argparse
import time

import numpy as np

from amdcn import kernels

# (in, out, dilation): first column layer, a wide column layer, the aggregator input
LAYERS = [(1, 32, 1), (32, 32, 4), (160, 32, 2)]


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(backend, x, w, b, g, d, repeat):
    ops = {
        "forward": lambda: kernels.conv2d_forward(x, w, b, d, backend),
        "grad_input": lambda: kernels.conv2d_backward_input(g, w, d, backend),
        "grad_kernel": lambda: kernels.conv2d_backward_kernel(g, x, w.shape, d, backend),
    }
    for fn in ops.values():
        fn()
    return {name: best_of(fn, repeat) for name, fn in ops.items()}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--batch", type=int, default=8)
    ap.add_argument("--size", type=int, default=32)
    args = ap.parse_args()
    backends = [b for b in kernels.BACKENDS if b != "numba" or kernels.HAS_NUMBA]
    rng = np.random.default_rng(0)
    print(f"batch={args.batch} size={args.size}x{args.size} best of {args.repeat} (ms)")
    print(f"{'layer':>14} {'op':>12} " + " ".join(f"{b:>8}" for b in backends) + ("  speedup" if len(backends) == 2 else ""))
    for ci, co, d in LAYERS:
        x = rng.normal(size=(args.batch, ci, args.size, args.size))
        w = rng.normal(size=(co, ci, 3, 3))
        b = rng.normal(size=co)
        g = rng.normal(size=(args.batch, co, args.size, args.size))
        res = {be: bench(be, x, w, b, g, d, args.repeat) for be in backends}
        for op in ("forward", "grad_input", "grad_kernel"):
            times = [res[be][op] * 1e3 for be in backends]
            line = f"{f'{ci}->{co} d={d}':>14} {op:>12} " + " ".join(f"{t:8.2f}" for t in times)
            if len(times) == 2:
                line += f"  {times[1] / times[0]:6.2f}x"
            print(line)


if __name__ == "__main__":
    main()
