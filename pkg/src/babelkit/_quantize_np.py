"""Pure-numpy quantization kernel, used when the compiled extension is
unavailable (or forced via BABELKIT_NO_EXT=1). Semantics match
``_quantize_c.quantize_inplace`` bit for bit."""

import math

import numpy as np


def quantize_inplace(data, mantissa_bits, exp_min, exp_max, flush_subnormals):
    """Quantize a flat float64 array in place; returns True if any value is
    non-finite afterwards."""
    step = math.ldexp(1.0, exp_min - mantissa_bits)
    min_normal = math.ldexp(1.0, exp_min)
    max_normal = (2.0 - math.ldexp(1.0, -mantissa_bits)) * math.ldexp(1.0, exp_max)

    work = (data != 0.0) & np.isfinite(data)
    v = data[work]
    m, e = np.frexp(v)
    q = np.ldexp(np.rint(np.ldexp(m, mantissa_bits + 1)), e - (mantissa_bits + 1))

    sub = (e - 1) < exp_min
    if sub.any():
        qs = np.rint(v[sub] / step) * step
        if flush_subnormals:
            qs[np.abs(qs) < min_normal] = 0.0
        q[sub] = qs

    over = np.abs(q) > max_normal
    if over.any():
        q[over] = np.copysign(np.inf, q[over])

    data[work] = q
    return bool(np.any(~np.isfinite(data)))
