"""Q16 fixed-point arithmetic.

A Q16 value is a signed integer ``raw`` standing for ``raw / 65536``.  Scalars
are plain Python ints, vectors are ``np.int64`` arrays.  Nothing here wraps:
products are checked against the int64 range and fall back to exact Python
integers when they would not fit.
"""
import math
import struct
from dataclasses import dataclass
from functools import cached_property
from decimal import Decimal, localcontext
from fractions import Fraction

import numpy as np

FRAC_BITS = 16
ONE = 1 << FRAC_BITS
INT64_MAX = (1 << 63) - 1

EXP_LUT_SIZE = 257
EXP_DOMAIN = 8 * ONE           # table covers exp(-t) for t in [0, 8]
_EXP_STEP = EXP_DOMAIN // 256  # 2048 raw units per table interval


def round_half_away(value) -> int:
    """Round an int, float or Fraction to the nearest integer, ties away from zero."""
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"cannot round non-finite value {value!r}")
        value = Fraction(value)
    mag = abs(value)
    q = mag.numerator // mag.denominator
    if 2 * (mag - q) >= 1:
        q += 1
    return -q if value < 0 else q


def q16_from_ratio(num: int, den: int) -> int:
    """Q16 raw value closest to ``num / den`` (ties away from zero)."""
    if den == 0:
        raise ZeroDivisionError("q16_from_ratio: zero denominator")
    return round_half_away(Fraction(num * ONE, den))


def q16_from_real(x) -> int:
    return round_half_away(Fraction(x) * ONE)


def to_real(raw):
    return np.asarray(raw, dtype=np.float64) / ONE


def _bound(a) -> int:
    """max |a| as a Python int."""
    if type(a) is np.ndarray and a.dtype == np.int64:
        if a.size == 0:
            return 0
        return max(-int(a.min()), int(a.max()))
    if isinstance(a, (int, np.integer)):
        return abs(int(a))
    a = np.asarray(a)
    if a.size == 0:
        return 0
    if a.dtype == object:
        return max(abs(int(v)) for v in a.flat)
    return max(-int(a.min()), int(a.max()))


def mul_shift(a, b, shift: int = FRAC_BITS, a_bound=None, b_bound=None):
    """``(a * b) >> shift`` elementwise with an overflow-free product.

    Stays in int64 when the operand bounds prove the product fits, otherwise
    evaluates with Python integers and converts back (raising if the shifted
    result itself does not fit in int64).  Callers that already know a bound
    on ``|a|`` or ``|b|`` may pass it to skip the reduction.
    """
    a_int = isinstance(a, (int, np.integer))
    b_int = isinstance(b, (int, np.integer))
    if a_int and b_int:
        return (int(a) * int(b)) >> shift
    if a_bound is None:
        a_bound = _bound(a)
    if b_bound is None:
        b_bound = _bound(b)
    if a_bound * b_bound <= INT64_MAX:
        if not a_int:
            a = np.asarray(a, dtype=np.int64)
        if not b_int:
            b = np.asarray(b, dtype=np.int64)
        return (a * b) >> shift
    wide = (np.asarray(a).astype(object) * np.asarray(b).astype(object)) >> shift
    return _narrow(wide)


def _narrow(wide) -> np.ndarray:
    if _bound(wide) > INT64_MAX:
        raise OverflowError("Q16 result exceeds the int64 range")
    return np.asarray(wide, dtype=np.int64)


def q16_mul(a, b, a_bound=None, b_bound=None):
    """Q16 product: arithmetic shift right by 16 of the exact product."""
    return mul_shift(a, b, FRAC_BITS, a_bound, b_bound)


# -- inverse square root ---------------------------------------------------

_ISQRT_FRAC = 32  # fractional bits carried by the Newton iterate


def _build_isqrt_seeds() -> tuple:
    # seed[e] ~ 1/sqrt(2**(e - 16) * sqrt(2)) in Q32: the geometric midpoint of
    # the octave selected by the leading bit. seed**4 == 2**(159 - 2e).
    seeds = []
    for e in range(64):
        p = 159 - 2 * e
        seeds.append(math.isqrt(math.isqrt(1 << p)) if p >= 0 else 1)
    return tuple(seeds)


ISQRT_SEEDS = _build_isqrt_seeds()
ISQRT_ITERATIONS = 3


def inv_sqrt_q16(x: int) -> int:
    """1/sqrt(x) for a positive Q16 ``x``.

    Seeded from a 64-entry table on the leading-bit position, then exactly
    three Newton steps ``y <- y * (3 - x*y*y) / 2``.  The iterate keeps 32
    fractional bits so that large inputs (tiny results) still converge; the
    result is rounded to Q16 at the end.
    """
    x = int(x)
    if x <= 0:
        raise ValueError(f"inv_sqrt_q16 needs a positive input, got raw {x}")
    y = ISQRT_SEEDS[x.bit_length() - 1]
    three = 3 << _ISQRT_FRAC
    for _ in range(ISQRT_ITERATIONS):
        xyy = (x * y * y) >> (FRAC_BITS + _ISQRT_FRAC)
        y = (y * (three - xyy)) >> (_ISQRT_FRAC + 1)
    shift = _ISQRT_FRAC - FRAC_BITS
    return (y + (1 << (shift - 1))) >> shift


# -- exponential / sigmoid / SiLU -------------------------------------------

def _build_exp_lut() -> np.ndarray:
    # Decimal exp is correctly rounded, so the table is platform-free.
    entries = []
    with localcontext() as ctx:
        ctx.prec = 50
        for i in range(EXP_LUT_SIZE):
            v = (Decimal(i - 256) / 32).exp() * ONE
            entries.append(round_half_away(Fraction(v)))
    return np.array(entries, dtype=np.int64)


EXP_LUT = _build_exp_lut()
EXP_LUT.flags.writeable = False


def exp_neg_lut(t):
    """exp(-t) for Q16 ``t`` in [0, 8], by linear interpolation in EXP_LUT.

    Accepts a scalar raw value or an int64 array.
    """
    arr = np.asarray(t, dtype=np.int64)
    if arr.size and (arr.min() < 0 or arr.max() > EXP_DOMAIN):
        raise ValueError("exp_neg_lut: argument outside [0, 8*ONE]; clamp first")
    idx = arr // _EXP_STEP
    frac = arr % _EXP_STEP
    hi = EXP_LUT[256 - idx]
    lo = EXP_LUT[np.maximum(255 - idx, 0)]
    # rounded interpolation: entries are positive so +half rounds away from zero
    out = (hi * (_EXP_STEP - frac) + lo * frac + _EXP_STEP // 2) // _EXP_STEP
    if np.ndim(t) == 0:
        return int(out)
    return out


def sigmoid_q16(x):
    """Logistic function in Q16.

    Non-positive inputs use exp(x) from the table directly; positive inputs
    go through ``ONE - sigmoid(-x)`` so the two halves sum to ONE exactly.
    Below -8 the exponent is chained as exp(-8) * exp(-(t - 8)), which
    underflows to zero past -16 instead of saturating at sigmoid(-8).
    """
    arr = np.asarray(x, dtype=np.int64)
    t = np.abs(arr)
    chunks = t // EXP_DOMAIN
    e = exp_neg_lut(t % EXP_DOMAIN)
    e = np.where(chunks == 0, e, np.where(chunks == 1, (e * EXP_LUT[0] + ONE // 2) >> FRAC_BITS, 0))
    den = ONE + e
    low = (e * ONE + den // 2) // den
    out = np.where(arr > 0, ONE - low, low)
    if np.ndim(x) == 0:
        return int(out)
    return out


def silu_q16(x):
    """SiLU(x) = x * sigmoid(x) in Q16."""
    return q16_mul(x, sigmoid_q16(x), b_bound=ONE)


# -- rotary tables -----------------------------------------------------------

RTAB_MAGIC = b"RTAB"
RTAB_VERSION = 1
_RTAB_HEADER = struct.Struct("<4sIIId")


@dataclass(frozen=True, eq=False)
class RopeTables:
    """Q16 cosine/sine tables indexed ``[position, frequency]``."""

    cos_tab: np.ndarray
    sin_tab: np.ndarray
    theta_base: float

    @property
    def max_ctx(self) -> int:
        return self.cos_tab.shape[0]

    @property
    def half_dim(self) -> int:
        return self.cos_tab.shape[1]

    @cached_property
    def bound(self) -> int:
        return max(_bound(self.cos_tab), _bound(self.sin_tab))

    def __eq__(self, other):
        if not isinstance(other, RopeTables):
            return NotImplemented
        return (
            struct.pack("<d", self.theta_base) == struct.pack("<d", other.theta_base)
            and np.array_equal(self.cos_tab, other.cos_tab)
            and np.array_equal(self.sin_tab, other.sin_tab)
        )

    def to_bytes(self) -> bytes:
        head = _RTAB_HEADER.pack(RTAB_MAGIC, RTAB_VERSION, self.max_ctx, self.half_dim,
                                 float(self.theta_base))
        return (head + self.cos_tab.astype("<i8").tobytes()
                + self.sin_tab.astype("<i8").tobytes())

    @classmethod
    def from_bytes(cls, data: bytes) -> "RopeTables":
        if len(data) < _RTAB_HEADER.size:
            raise ValueError("RoPE table artifact truncated")
        magic, version, max_ctx, half, theta = _RTAB_HEADER.unpack_from(data)
        if magic != RTAB_MAGIC:
            raise ValueError(f"bad RoPE table magic {magic!r}")
        if version != RTAB_VERSION:
            raise ValueError(f"unsupported RoPE table version {version}")
        n = max_ctx * half
        expected = _RTAB_HEADER.size + 16 * n
        if len(data) != expected:
            raise ValueError(f"RoPE table artifact is {len(data)} bytes, expected {expected}")
        body = np.frombuffer(data, dtype="<i8", offset=_RTAB_HEADER.size)
        cos_tab = body[:n].astype(np.int64).reshape(max_ctx, half)
        sin_tab = body[n:].astype(np.int64).reshape(max_ctx, half)
        return cls(cos_tab, sin_tab, theta)


def build_rope_tables(theta_base: float, d_head: int, max_ctx: int) -> RopeTables:
    """Precompute rotary tables.

    Angles and cos/sin are evaluated in double precision and rounded to Q16;
    this is the only floating-point step in the integer engine.  Ship the
    result with ``to_bytes`` when bit-for-bit agreement must not depend on the
    host libm.
    """
    if d_head <= 0 or d_head % 2:
        raise ValueError(f"d_head must be a positive even integer, got {d_head}")
    if max_ctx < 1:
        raise ValueError("max_ctx must be >= 1")
    half = d_head // 2
    cos_tab = np.empty((max_ctx, half), dtype=np.int64)
    sin_tab = np.empty((max_ctx, half), dtype=np.int64)
    inv_freq = [float(theta_base) ** (-2.0 * k / d_head) for k in range(half)]
    for pos in range(max_ctx):
        for k, f in enumerate(inv_freq):
            angle = pos * f
            cos_tab[pos, k] = q16_from_real(math.cos(angle))
            sin_tab[pos, k] = q16_from_real(math.sin(angle))
    return RopeTables(cos_tab, sin_tab, float(theta_base))
