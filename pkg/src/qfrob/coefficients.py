"""Coefficient arithmetic: exact rationals and high-precision complex numbers.

Exact values are plain ``fractions.Fraction``.  Inexact values are complex
numbers carried at a stated decimal precision on top of mpmath.  Both kinds
are routed through small field objects so that the matrix, series and table
code can run the same algorithms on either arithmetic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Any, Union

import mpmath

from .errors import QfrobError

Rational = Fraction

DEFAULT_PRECISION = 60

# Guard digits carried on top of any requested decimal precision.
GUARD_DIGITS = 10

mpmath.mp.dps = DEFAULT_PRECISION + GUARD_DIGITS


@lru_cache(maxsize=None)
def _bernoulli(n: int) -> Fraction:
    # B_0 = 1, B_1 = -1/2; even entries match x/(1 - e^{-x}) = 1 + x/2 + sum B_2k x^2k/(2k)!.
    if n == 0:
        return Fraction(1)
    total = Fraction(0)
    for k in range(n):
        total += Fraction(math.comb(n + 1, k)) * _bernoulli(k)
    return -total / (n + 1)


def bernoulli_number(two_k: int) -> Fraction:
    """Bernoulli number B_{two_k} for even two_k >= 2.

    The normalization is the one fixed by the generating function
    x/(1 - e^{-x}) = 1 + x/2 + sum_{k>=1} B_{2k} x^{2k}/(2k)!,
    so B_2 = 1/6, B_4 = -1/30, B_6 = 1/42.
    """
    if two_k < 2 or two_k % 2 != 0:
        raise QfrobError(f"bernoulli_number expects an even index >= 2, got {two_k}")
    return _bernoulli(two_k)


def _to_mpc(x: Any) -> mpmath.mpc:
    if isinstance(x, BigComplexNumber):
        return mpmath.mpc(x.re, x.im)
    if isinstance(x, Fraction):
        return mpmath.mpc(mpmath.mpf(x.numerator) / x.denominator)
    if isinstance(x, (int, float, complex, mpmath.mpf, mpmath.mpc)):
        return mpmath.mpc(x)
    raise TypeError(f"cannot interpret {x!r} as a complex number")


def approx_equal(a: Any, b: Any, tol: Any = 0) -> bool:
    """True when |a - b| <= tol; exact comparison when both sides are rational."""
    if tol == 0 and isinstance(a, (int, Fraction)) and isinstance(b, (int, Fraction)):
        return a == b
    return abs(_to_mpc(a) - _to_mpc(b)) <= mpmath.mpf(tol)


@dataclass(frozen=True)
class BigComplexNumber:
    """A complex number with an explicit decimal precision (>= 30 digits).

    This is the serialization face of the inexact arithmetic; internally the
    engines work with mpmath numbers directly and convert at the boundary.
    """

    re: mpmath.mpf
    im: mpmath.mpf
    precision: int = DEFAULT_PRECISION

    def __post_init__(self) -> None:
        if self.precision < 30:
            raise QfrobError(f"precision must be at least 30 digits, got {self.precision}")
        object.__setattr__(self, "re", mpmath.mpf(self.re))
        object.__setattr__(self, "im", mpmath.mpf(self.im))

    @staticmethod
    def from_value(x: Any, precision: int = DEFAULT_PRECISION) -> "BigComplexNumber":
        z = _to_mpc(x)
        return BigComplexNumber(z.real, z.imag, precision)

    def to_mpc(self) -> mpmath.mpc:
        return mpmath.mpc(self.re, self.im)

    def _bin(self, other: Any, op) -> "BigComplexNumber":
        p = self.precision
        if isinstance(other, BigComplexNumber):
            p = min(p, other.precision)
        z = op(self.to_mpc(), _to_mpc(other))
        return BigComplexNumber(z.real, z.imag, p)

    def __add__(self, other: Any) -> "BigComplexNumber":
        return self._bin(other, lambda a, b: a + b)

    __radd__ = __add__

    def __sub__(self, other: Any) -> "BigComplexNumber":
        return self._bin(other, lambda a, b: a - b)

    def __rsub__(self, other: Any) -> "BigComplexNumber":
        return self._bin(other, lambda a, b: b - a)

    def __mul__(self, other: Any) -> "BigComplexNumber":
        return self._bin(other, lambda a, b: a * b)

    __rmul__ = __mul__

    def __truediv__(self, other: Any) -> "BigComplexNumber":
        return self._bin(other, lambda a, b: a / b)

    def __rtruediv__(self, other: Any) -> "BigComplexNumber":
        return self._bin(other, lambda a, b: b / a)

    def __neg__(self) -> "BigComplexNumber":
        return BigComplexNumber(-self.re, -self.im, self.precision)

    def __abs__(self) -> mpmath.mpf:
        return abs(self.to_mpc())

    def conjugate(self) -> "BigComplexNumber":
        return BigComplexNumber(self.re, -self.im, self.precision)


Coefficient = Union[Fraction, int, BigComplexNumber, mpmath.mpf, mpmath.mpc]


class RationalField:
    """Exact arithmetic on Fraction values."""

    exact = True

    def __init__(self) -> None:
        self.zero = Fraction(0)
        self.one = Fraction(1)
        self.tol = Fraction(0)

    def convert(self, x: Any) -> Fraction:
        if isinstance(x, Fraction):
            return x
        if isinstance(x, int):
            return Fraction(x)
        if isinstance(x, str):
            return Fraction(x)
        raise QfrobError(f"cannot convert {x!r} to an exact rational")

    def add(self, a: Fraction, b: Fraction) -> Fraction:
        return a + b

    def sub(self, a: Fraction, b: Fraction) -> Fraction:
        return a - b

    def neg(self, a: Fraction) -> Fraction:
        return -a

    def mul(self, a: Fraction, b: Fraction) -> Fraction:
        return a * b

    def inv(self, a: Fraction) -> Fraction:
        if a == 0:
            raise ZeroDivisionError("inverting zero in the rational field")
        return 1 / a

    def magnitude(self, a: Fraction):
        return abs(a)

    def is_zero(self, a: Fraction) -> bool:
        return a == 0

    def close(self, a: Fraction, b: Fraction) -> bool:
        return a == b


class BigComplexField:
    """Complex arithmetic at a fixed decimal precision, with tolerance tests.

    Comparisons treat two values as equal when they differ by less than
    10^-(precision - 5); the working mpmath precision keeps GUARD_DIGITS
    extra digits so that this headroom is meaningful.
    """

    exact = False

    def __init__(self, precision: int = DEFAULT_PRECISION) -> None:
        if precision < 30:
            raise QfrobError(f"precision must be at least 30 digits, got {precision}")
        self.precision = precision
        if mpmath.mp.dps < precision + GUARD_DIGITS:
            mpmath.mp.dps = precision + GUARD_DIGITS
        self.zero = mpmath.mpc(0)
        self.one = mpmath.mpc(1)
        self.tol = mpmath.mpf(10) ** (-(precision - 5))

    def convert(self, x: Any) -> mpmath.mpc:
        return _to_mpc(x)

    def add(self, a, b):
        return a + b

    def sub(self, a, b):
        return a - b

    def neg(self, a):
        return -a

    def mul(self, a, b):
        return a * b

    def inv(self, a):
        if abs(a) <= self.tol:
            raise ZeroDivisionError("inverting a value indistinguishable from zero")
        return 1 / a

    def magnitude(self, a):
        return abs(a)

    def is_zero(self, a) -> bool:
        return abs(a) <= self.tol

    def close(self, a, b) -> bool:
        return abs(a - b) <= self.tol


def coeff_to_json(x: Any) -> Any:
    """JSON form: rationals as "p/q" strings, complex values as re/im/precision."""
    if isinstance(x, int):
        x = Fraction(x)
    if isinstance(x, Fraction):
        return f"{x.numerator}/{x.denominator}"
    if isinstance(x, BigComplexNumber):
        digits = x.precision + 5
        return {
            "re": mpmath.nstr(x.re, digits),
            "im": mpmath.nstr(x.im, digits),
            "precision": x.precision,
        }
    if isinstance(x, (mpmath.mpf, mpmath.mpc)):
        return coeff_to_json(BigComplexNumber.from_value(x))
    raise QfrobError(f"no JSON form for coefficient {x!r}")


def coeff_from_json(obj: Any) -> Coefficient:
    if isinstance(obj, str):
        return Fraction(obj)
    if isinstance(obj, dict):
        return BigComplexNumber(
            mpmath.mpf(obj["re"]), mpmath.mpf(obj["im"]), int(obj["precision"])
        )
    raise QfrobError(f"unrecognized coefficient JSON {obj!r}")
