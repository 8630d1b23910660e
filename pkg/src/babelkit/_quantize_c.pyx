# cython: boundscheck=False, wraparound=False, cdivision=True
"""Round-to-nearest float quantization kernel.

Single pass over a flat float64 buffer: round each value to the nearest
number representable with the given mantissa width and exponent range.
Values beyond the largest representable magnitude become +/-inf; NaN and
inf pass through untouched.
"""

from libc.math cimport frexp, ldexp, rint, fabs, isfinite, INFINITY

import numpy as np


def quantize_inplace(double[::1] data, int mantissa_bits, int exp_min,
                     int exp_max, bint flush_subnormals):
    """Quantize ``data`` in place. Returns True if any value is non-finite
    afterwards (overflow to inf, or pre-existing inf/NaN)."""
    cdef Py_ssize_t i, n = data.shape[0]
    cdef double x, m, q
    cdef int e
    cdef double step = ldexp(1.0, exp_min - mantissa_bits)
    cdef double min_normal = ldexp(1.0, exp_min)
    cdef double max_normal = (2.0 - ldexp(1.0, -mantissa_bits)) * ldexp(1.0, exp_max)
    cdef bint any_nonfinite = False
    with nogil:
        for i in range(n):
            x = data[i]
            if x == 0.0:
                continue
            if not isfinite(x):
                any_nonfinite = True
                continue
            m = frexp(x, &e)
            if e - 1 < exp_min:
                # subnormal range: fixed absolute grid
                q = rint(x / step) * step
                if flush_subnormals and fabs(q) < min_normal:
                    q = 0.0
            else:
                q = ldexp(rint(ldexp(m, mantissa_bits + 1)), e - (mantissa_bits + 1))
                if fabs(q) > max_normal:
                    q = INFINITY if q > 0 else -INFINITY
                    any_nonfinite = True
            data[i] = q
    return any_nonfinite
