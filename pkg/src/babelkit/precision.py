"""Emulated floating-point precision modes.

Reduced precision is emulated by rounding every primitive's output (and
every accumulated gradient) to the nearest value representable with a
configurable mantissa width and exponent range. The default mode is exact
float64, under which quantization is the identity.

The element-wise kernel has a compiled (Cython) implementation selected at
import time, with a numpy fallback; set BABELKIT_NO_EXT=1 to force the
fallback. Both produce bit-identical results.
"""

import math
import os
from dataclasses import dataclass

import numpy as np

if os.environ.get("BABELKIT_NO_EXT") == "1":
    from babelkit import _quantize_np as _kernel

    HAVE_EXT = False
else:
    try:
        from babelkit import _quantize_c as _kernel

        HAVE_EXT = True
    except ImportError:
        from babelkit import _quantize_np as _kernel

        HAVE_EXT = False


@dataclass(frozen=True)
class PrecisionMode:
    """Representable-value grid: ``mantissa_bits`` explicit mantissa bits
    (52 = float64) and an unbiased exponent range [exponent_min, exponent_max]."""

    mantissa_bits: int
    exponent_min: int
    exponent_max: int
    flush_subnormals: bool = False

    def __post_init__(self):
        if not 0 <= self.mantissa_bits <= 52:
            raise ValueError(f"mantissa_bits must be in [0, 52], got {self.mantissa_bits}")
        if self.exponent_min > self.exponent_max:
            raise ValueError("exponent_min must not exceed exponent_max")

    @property
    def is_exact(self):
        return (
            self.mantissa_bits == 52
            and self.exponent_min <= -1022
            and self.exponent_max >= 1023
        )

    @property
    def max_finite(self):
        """Largest representable finite magnitude."""
        return (2.0 - math.ldexp(1.0, -self.mantissa_bits)) * math.ldexp(
            1.0, self.exponent_max
        )


EXACT = PrecisionMode(mantissa_bits=52, exponent_min=-1022, exponent_max=1023)
FP16 = PrecisionMode(mantissa_bits=10, exponent_min=-14, exponent_max=15)


def quantize_array(x, mode):
    """Round each element of ``x`` to the nearest value representable under
    ``mode``. Returns a new float64 array (or ``x`` itself in exact mode).

    Magnitudes beyond ``mode.max_finite`` overflow to signed infinity; NaN
    and infinities pass through. Non-finiteness is data here, not an error.
    """
    arr = np.asarray(x, dtype=np.float64)
    if mode.is_exact:
        return arr
    out = np.array(arr, copy=True, order="C")
    _kernel.quantize_inplace(
        out.reshape(-1),
        mode.mantissa_bits,
        mode.exponent_min,
        mode.exponent_max,
        mode.flush_subnormals,
    )
    return out


def quantize_scalar(x, mode):
    return float(quantize_array(np.array([x]), mode)[0])
