"""Small exact-arithmetic helpers shared across the engine.

All game-relevant quantities are `fractions.Fraction`; these utilities cover
the places where plain Fraction arithmetic is not quite enough: exact binary
logarithms (for charge levels and dual windows), exact grid-rounded square
roots (for Euclidean distances), cached harmonic numbers (for the potential),
and the "p/q" string round-trip used by every serialized artifact.
"""

from __future__ import annotations

import math
from fractions import Fraction

from .errors import ConfigError

RATIO_DECIMALS = 6


def parse_rational(text: str | int) -> Fraction:
    """Parse "p/q" (or a bare integer) into a Fraction.

    Only integer numerators/denominators are accepted; this is the on-disk
    format, so reject floats loudly instead of guessing.
    """
    if isinstance(text, bool):
        raise ConfigError(f"expected a rational, got {text!r}")
    if isinstance(text, int):
        return Fraction(text)
    if not isinstance(text, str):
        raise ConfigError(f"expected a rational 'p/q' string, got {text!r}")
    try:
        frac = Fraction(text.strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"bad rational {text!r}: {exc}") from None
    return frac


def format_rational(value: Fraction) -> str:
    """Inverse of parse_rational: "p" for integers, "p/q" otherwise."""
    return str(Fraction(value))


def format_decimal(value: Fraction, places: int = RATIO_DECIMALS) -> str:
    """Exact fixed-point decimal rendering (round half away from zero).

    Used for the human-readable columns next to the exact "p/q" ones; exact
    so that identical inputs always serialize to identical bytes.
    """
    if value < 0:
        return "-" + format_decimal(-value, places)
    scaled = value * 10**places
    whole = scaled.numerator // scaled.denominator
    if 2 * (scaled - whole) >= 1:
        whole += 1
    return f"{whole // 10**places}.{whole % 10**places:0{places}d}"


def floor_log2(value: Fraction) -> int:
    """Largest j with 2**j <= value, computed exactly. Requires value > 0."""
    if value <= 0:
        raise ValueError(f"floor_log2 requires a positive value, got {value}")
    p, q = value.numerator, value.denominator
    j = p.bit_length() - q.bit_length()
    # bit_length gives j within 1; fix up exactly.
    while _pow2_le(j + 1, p, q):
        j += 1
    while not _pow2_le(j, p, q):
        j -= 1
    return j


def _pow2_le(j: int, p: int, q: int) -> bool:
    # 2**j <= p/q without constructing Fractions.
    if j >= 0:
        return (q << j) <= p
    return q <= (p << -j)


def ceil_log2(value: Fraction) -> int:
    j = floor_log2(value)
    return j if pow2(j) == value else j + 1


def pow2(j: int) -> Fraction:
    """2**j as an exact Fraction, j may be negative."""
    if j >= 0:
        return Fraction(1 << j)
    return Fraction(1, 1 << (-j))


_HARMONIC: list[Fraction] = [Fraction(0)]


def harmonic(n: int) -> Fraction:
    """H_n = 1 + 1/2 + ... + 1/n, memoized."""
    if n < 0:
        raise ValueError("harmonic number of a negative index")
    while len(_HARMONIC) <= n:
        k = len(_HARMONIC)
        _HARMONIC.append(_HARMONIC[-1] + Fraction(1, k))
    return _HARMONIC[n]


def sqrt_ceil_grid(value: Fraction, denominator: int) -> Fraction:
    """Smallest k/denominator whose square is >= value (value >= 0).

    Rounding *up* to the grid is deliberate: ceil(a) <= ceil(b) + ceil(c)
    whenever a <= b + c, so distances rounded this way still satisfy the
    triangle inequality, which floor or nearest rounding can break on
    near-collinear triples.
    """
    if value < 0:
        raise ValueError("square root of a negative value")
    num = value.numerator * denominator * denominator
    den = value.denominator
    target = -(-num // den)  # ceil(num/den)
    k = math.isqrt(target)
    if k * k < target:
        k += 1
    return Fraction(k, denominator)


def float_log2(value: Fraction) -> float:
    """log2 as a float for reporting; exact code paths use floor_log2."""
    # math.log2(float(value)) overflows for huge numerators; go via the
    # exact floor and a bounded mantissa instead.
    j = floor_log2(value)
    mant = value / pow2(j)
    return j + math.log2(float(mant))
