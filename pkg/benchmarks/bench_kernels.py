"""Benchmark the numba and numpy kernel backends against each other.

Runs the fixed-order matmul and the blockwise attention forward/backward on
identical inputs under every available backend and reports median wall times
plus the speedup of each backend relative to numpy.

    python3 benchmarks/bench_kernels.py --n 2048 --h 64 --repeats 5
"""

import argparse
import statistics
import time

import numpy as np

from attn2d import kernels


def time_call(fn, repeats):
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def build_cases(n, h, block, seed):
    rng = np.random.default_rng(seed)
    q = rng.uniform(-1, 1, (n, h))
    k = rng.uniform(-1, 1, (n, h))
    v = rng.uniform(-1, 1, (n, h))
    o = rng.uniform(-1, 1, (n, h))
    d_out = rng.uniform(-1, 1, (n, h))
    idx = np.arange(n, dtype=np.int64)
    a = rng.uniform(-1, 1, (n, h))
    b = rng.uniform(-1, 1, (h, n))

    def run_matmul():
        out = np.empty((n, n))
        kernels.matmul(a, b, out)
        return out

    def run_forward():
        m = np.full(n, -np.inf)
        nacc = np.zeros((n, h))
        d = np.zeros(n)
        kernels.flash_forward(q, k, v, idx, idx, True, 1.0, block, m, nacc, d)
        return m, nacc, d

    # honest softmax statistics so the backward recurrence is well-posed
    m_stat = np.full(n, -np.inf)
    nacc0 = np.zeros((n, h))
    d_stat = np.zeros(n)
    kernels.flash_forward(q, k, v, idx, idx, True, 1.0, block, m_stat, nacc0, d_stat)

    def run_backward():
        dq = np.zeros((n, h))
        dk = np.zeros((n, h))
        dv = np.zeros((n, h))
        kernels.flash_backward(q, k, v, o, d_out, m_stat, d_stat, idx, idx,
                               True, 1.0, dq, dk, dv)
        return dq, dk, dv

    return {"matmul": run_matmul, "flash_forward": run_forward,
            "flash_backward": run_backward}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--n", type=int, default=1024, help="token count")
    parser.add_argument("--h", type=int, default=64, help="head dimension")
    parser.add_argument("--block", type=int, default=64, help="kernel block width")
    parser.add_argument("--repeats", type=int, default=5, help="timed repetitions")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    original = kernels.backend_name()
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)}   n={args.n} h={args.h} "
          f"block={args.block} repeats={args.repeats}")

    results = {}
    outputs = {}
    try:
        for backend in backends:
            kernels.use_backend(backend)
            cases = build_cases(args.n, args.h, args.block, args.seed)
            for name, fn in cases.items():
                fn()  # warmup (numba compiles here; numpy touches caches)
                results[(backend, name)] = time_call(fn, args.repeats)
                outputs[(backend, name)] = fn()
    finally:
        kernels.use_backend(original)

    case_names = ("matmul", "flash_forward", "flash_backward")
    width = max(len(c) for c in case_names)
    header = f"{'case':<{width}}" + "".join(f"  {b:>12}" for b in backends)
    if "numpy" in backends:
        header += "  speedup_vs_numpy"
    print(header)
    for name in case_names:
        row = f"{name:<{width}}"
        for backend in backends:
            row += f"  {results[(backend, name)] * 1e3:>10.2f}ms"
        if "numpy" in backends and len(backends) > 1:
            other = next(b for b in backends if b != "numpy")
            row += f"  {results[('numpy', name)] / results[(other, name)]:>8.2f}x"
        print(row)

    # the two paths must agree to the last bit of double rounding noise
    if len(backends) > 1:
        worst = 0.0
        for name in case_names:
            a, b = outputs[(backends[0], name)], outputs[(backends[1], name)]
            arrays = zip(a, b) if isinstance(a, tuple) else [(a, b)]
            for x, y in arrays:
                finite = np.isfinite(x) & np.isfinite(y)
                worst = max(worst, float(np.max(np.abs(x[finite] - y[finite]))))
        print(f"max |numba - numpy| over all outputs: {worst:.3e}")


if __name__ == "__main__":
    main()
