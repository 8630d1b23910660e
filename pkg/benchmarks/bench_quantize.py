"""Benchmark the quantization kernel: compiled extension vs numpy fallback.

Run:  python benchmarks/bench_quantize.py [--sizes 1000,100000,1000000]
"""

import argparse
import time

import numpy as np

from babelkit import _quantize_np
from babelkit.precision import FP16, HAVE_EXT

try:
    from babelkit import _quantize_c
except ImportError:
    _quantize_c = None


def bench(kernel, data, mode, repeats):
    best = float("inf")
    for _ in range(repeats):
        buf = data.copy()
        t0 = time.perf_counter()
        kernel.quantize_inplace(
            buf, mode.mantissa_bits, mode.exponent_min, mode.exponent_max,
            mode.flush_subnormals,
        )
        best = min(best, time.perf_counter() - t0)
    return best, buf


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--sizes", default="1000,100000,1000000")
    parser.add_argument("--repeats", type=int, default=7)
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    print(f"compiled extension available: {HAVE_EXT}")
    rng = np.random.default_rng(0)
    for n in sizes:
        data = rng.standard_normal(n) * np.exp(rng.uniform(-20, 20, n))
        t_np, out_np = bench(_quantize_np, data, FP16, args.repeats)
        line = f"n={n:>9,}  numpy {t_np * 1e3:8.3f} ms"
        if _quantize_c is not None:
            t_c, out_c = bench(_quantize_c, data, FP16, args.repeats)
            same = out_np.tobytes() == out_c.tobytes()
            line += f"  cython {t_c * 1e3:8.3f} ms  speedup {t_np / t_c:5.2f}x  bit-identical={same}"
        print(line)


if __name__ == "__main__":
    main()
