"""FP8 e4m3 (the no-infinity variant) in software.

Layout: 1 sign bit, 4 exponent bits (bias 7), 3 mantissa bits.  Exponent
field 15 is an ordinary binade except for mantissa 7, which is NaN, so the
largest finite magnitude is 1.75 * 2^8 = 448.  Subnormals step by 2^-9.
Encoding rounds to nearest with ties to even and saturates at +-448.
"""

from __future__ import annotations

import numpy as np

MAX_FINITE = 448.0
MIN_SUBNORMAL = 2.0**-9
MIN_NORMAL = 2.0**-6
NAN_CODE = 0x7F


def fp8_e4m3_decode(code) -> np.ndarray | float:
    c = np.asarray(code, dtype=np.int64)
    if np.any((c < 0) | (c > 255)):
        raise ValueError("fp8 codes must be in 0..255")
    sign = np.where(c & 0x80, -1.0, 1.0)
    exp = (c >> 3) & 0xF
    man = (c & 0x7).astype(np.float64)
    mag = np.where(exp == 0, man * MIN_SUBNORMAL, (1.0 + man / 8.0) * np.exp2(exp - 7.0))
    out = np.where((c & 0x7F) == NAN_CODE, np.nan, sign * mag)
    return float(out) if out.ndim == 0 else out


def fp8_e4m3_encode(x) -> np.ndarray | int:
    """Nearest e4m3 code (ties to even mantissa), saturating; NaN keeps its sign."""
    x = np.asarray(x, dtype=np.float64)
    neg = np.signbit(x)
    a = np.abs(x)
    nan = np.isnan(x)
    a = np.where(nan, 0.0, np.minimum(a, MAX_FINITE))
    # quantum of the binade containing a (subnormal range shares the 2^-6 binade's quantum)
    _, e = np.frexp(a)
    unb = np.maximum(e - 1, -6)
    quantum = np.exp2(unb - 3.0)
    v = np.rint(a / quantum) * quantum  # exact scaling by powers of two; rint is half-to-even
    v = np.minimum(v, MAX_FINITE)
    _, e2 = np.frexp(v)
    E = e2 - 1
    normal = v >= MIN_NORMAL
    exp_field = np.where(normal, E + 7, 0)
    man_field = np.where(normal, v / np.exp2(E.astype(np.float64)) * 8.0 - 8.0, v / MIN_SUBNORMAL)
    code = (exp_field.astype(np.int64) << 3) | np.rint(man_field).astype(np.int64)
    code = np.where(neg, code | 0x80, code)
    code = np.where(nan, np.where(neg, 0xFF, NAN_CODE), code)
    return int(code) if code.ndim == 0 else code.astype(np.int64)


def fp8_round(x) -> np.ndarray:
    return fp8_e4m3_decode(fp8_e4m3_encode(x))


def pow2_scale(x) -> float:
    """Largest power of two that keeps ``max|x| * scale <= 448``."""
    amax = float(np.max(np.abs(x))) if np.size(x) else 0.0
    if amax == 0.0:
        return 1.0
    return float(2.0 ** np.floor(np.log2(MAX_FINITE / amax)))


def fp8_fake_quant(x) -> np.ndarray:
    """Per-tensor power-of-two scaled FP8 round trip.

    A power-of-two scale only shifts exponents, so values that are already
    representable (and stay in range) come back unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    s = pow2_scale(x)
    return fp8_round(x * s) / s
