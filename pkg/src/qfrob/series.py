"""Matrix Laurent series in z, their adjoints, products and exp/log.

Matrices are tuples of tuples over a coefficient field.  A MatrixZSeries
stores one matrix per z-power inside a window [lo, hi] of powers that are
reliable; reading outside the window is an error rather than a silent zero.
Products narrow the window to the range where no unknown coefficient could
have contributed.

The module also carries the bivariate division used by the triangular group
actions, and a sparse multivariate Polynomial with an optional total-degree
cap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from enum import Enum
from fractions import Fraction
from typing import Any, Callable, Dict, Mapping, Optional, Sequence, Tuple

from .coefficients import RationalField
from .errors import NonSymplecticError, QfrobError, WindowError

Matrix = Tuple[Tuple[Any, ...], ...]


def mat_identity(n: int, field) -> Matrix:
    return tuple(
        tuple(field.one if i == j else field.zero for j in range(n)) for i in range(n)
    )


def mat_zero(n: int, field) -> Matrix:
    return tuple(tuple(field.zero for _ in range(n)) for _ in range(n))


def mat_convert(rows: Sequence[Sequence[Any]], field) -> Matrix:
    return tuple(tuple(field.convert(x) for x in row) for row in rows)


def mat_add(a: Matrix, b: Matrix, field) -> Matrix:
    return tuple(
        tuple(field.add(x, y) for x, y in zip(ra, rb)) for ra, rb in zip(a, b)
    )


def mat_sub(a: Matrix, b: Matrix, field) -> Matrix:
    return tuple(
        tuple(field.sub(x, y) for x, y in zip(ra, rb)) for ra, rb in zip(a, b)
    )


def mat_scale(c: Any, a: Matrix, field) -> Matrix:
    return tuple(tuple(field.mul(c, x) for x in row) for row in a)


def mat_mul(a: Matrix, b: Matrix, field) -> Matrix:
    n, m = len(a), len(b[0])
    inner = len(b)
    out = []
    for i in range(n):
        row = []
        for j in range(m):
            s = field.zero
            for k in range(inner):
                s = field.add(s, field.mul(a[i][k], b[k][j]))
            row.append(s)
        out.append(tuple(row))
    return tuple(out)


def mat_vec(a: Matrix, v: Sequence[Any], field) -> Tuple[Any, ...]:
    return tuple(
        _dot(row, v, field) for row in a
    )


def _dot(u: Sequence[Any], v: Sequence[Any], field) -> Any:
    s = field.zero
    for x, y in zip(u, v):
        s = field.add(s, field.mul(x, y))
    return s


def mat_transpose(a: Matrix) -> Matrix:
    return tuple(zip(*a))


def mat_inv(a: Matrix, field) -> Matrix:
    """Gauss-Jordan inversion with magnitude pivoting."""
    n = len(a)
    work = [list(row) for row in a]
    inv = [list(row) for row in mat_identity(n, field)]
    for col in range(n):
        pivot = max(range(col, n), key=lambda r: field.magnitude(work[r][col]))
        if field.is_zero(work[pivot][col]):
            raise QfrobError("singular matrix")
        work[col], work[pivot] = work[pivot], work[col]
        inv[col], inv[pivot] = inv[pivot], inv[col]
        scale = field.inv(work[col][col])
        work[col] = [field.mul(scale, x) for x in work[col]]
        inv[col] = [field.mul(scale, x) for x in inv[col]]
        for r in range(n):
            if r == col or field.is_zero(work[r][col]):
                continue
            factor = work[r][col]
            work[r] = [field.sub(x, field.mul(factor, y)) for x, y in zip(work[r], work[col])]
            inv[r] = [field.sub(x, field.mul(factor, y)) for x, y in zip(inv[r], inv[col])]
    return tuple(tuple(row) for row in inv)


def gram_adjoint(a: Matrix, gram: Matrix, gram_inv: Matrix, field) -> Matrix:
    """Adjoint with respect to a symmetric pairing G: returns G^-1 a^T G."""
    return mat_mul(gram_inv, mat_mul(mat_transpose(a), gram, field), field)


def mat_max_abs(a: Matrix, field):
    return max(field.magnitude(x) for row in a for x in row)


class SymplecticKind(Enum):
    """Which triangular family a series belongs to.

    LOWER: series in 1/z with constant term the identity (calibrations).
    UPPER: series in z with constant term the identity (asymptotic parts).
    """

    LOWER = "lower"
    UPPER = "upper"


@dataclass(frozen=True)
class MatrixZSeries:
    """A matrix Laurent series sum_k coeffs[k] z^k, reliable on [lo, hi].

    coeffs may omit powers inside the window (those read as zero); powers
    outside the window are unknown and reading them raises WindowError.
    """

    dim: int
    gram: Matrix
    lo: int
    hi: int
    coeffs: Mapping[int, Matrix]
    field: Any = dc_field(default_factory=RationalField)

    def __post_init__(self) -> None:
        if self.lo > self.hi:
            raise WindowError(f"empty window [{self.lo}, {self.hi}]")
        for k in self.coeffs:
            if k < self.lo or k > self.hi:
                raise WindowError(f"stored power {k} outside window [{self.lo}, {self.hi}]")

    def coeff(self, k: int) -> Matrix:
        if k < self.lo or k > self.hi:
            raise WindowError(f"power {k} outside reliable window [{self.lo}, {self.hi}]")
        got = self.coeffs.get(k)
        if got is None:
            return mat_zero(self.dim, self.field)
        return got

    def gram_inv(self) -> Matrix:
        return mat_inv(self.gram, self.field)

    def adjoint(self, negate_z: bool = False) -> "MatrixZSeries":
        """Pairing-transpose of every coefficient, optionally with z -> -z."""
        ginv = self.gram_inv()
        out: Dict[int, Matrix] = {}
        for k, m in self.coeffs.items():
            adj = gram_adjoint(m, self.gram, ginv, self.field)
            if negate_z and k % 2 != 0:
                adj = mat_scale(self.field.convert(-1), adj, self.field)
            out[k] = adj
        return MatrixZSeries(self.dim, self.gram, self.lo, self.hi, out, self.field)

    def scale(self, c: Any) -> "MatrixZSeries":
        c = self.field.convert(c)
        return MatrixZSeries(
            self.dim, self.gram, self.lo, self.hi,
            {k: mat_scale(c, m, self.field) for k, m in self.coeffs.items()},
            self.field,
        )

    def add(self, other: "MatrixZSeries") -> "MatrixZSeries":
        lo, hi = max(self.lo, other.lo), min(self.hi, other.hi)
        if lo > hi:
            raise WindowError("windows do not overlap")
        out: Dict[int, Matrix] = {}
        for k in range(lo, hi + 1):
            m = mat_add(self.coeff(k), other.coeff(k), self.field)
            out[k] = m
        return MatrixZSeries(self.dim, self.gram, lo, hi, out, self.field)

    def sub_identity(self) -> "MatrixZSeries":
        out = dict(self.coeffs)
        ident = mat_identity(self.dim, self.field)
        if not (self.lo <= 0 <= self.hi):
            raise WindowError("window does not contain the constant term")
        out[0] = mat_sub(self.coeff(0), ident, self.field)
        return MatrixZSeries(self.dim, self.gram, self.lo, self.hi, out, self.field)

    def max_abs(self):
        vals = [mat_max_abs(m, self.field) for m in self.coeffs.values()]
        return max(vals) if vals else self.field.magnitude(self.field.zero)


def mat_multiply(a: MatrixZSeries, b: MatrixZSeries) -> MatrixZSeries:
    """Product of series; the window narrows to where the result is complete.

    For two series supported in z^<=0 (or both in z^>=0) with windows down to
    lo1 and lo2, coefficients of the product are complete exactly on
    [max(lo1, lo2), 0] (respectively [0, min(hi1, hi2)]).
    """
    if a.dim != b.dim:
        raise QfrobError("dimension mismatch")
    field = a.field
    if a.hi <= 0 and b.hi <= 0:
        lo, hi = max(a.lo, b.lo), 0
    elif a.lo >= 0 and b.lo >= 0:
        lo, hi = 0, min(a.hi, b.hi)
    else:
        raise WindowError("mixed-support products are not window-safe")
    if lo > hi:
        raise WindowError("product window is empty")
    out: Dict[int, Matrix] = {}
    for k in range(lo, hi + 1):
        acc = mat_zero(a.dim, field)
        for j in range(max(a.lo, k - b.hi), min(a.hi, k - b.lo) + 1):
            ma = a.coeffs.get(j)
            mb = b.coeffs.get(k - j)
            if ma is None or mb is None:
                continue
            acc = mat_add(acc, mat_mul(ma, mb, field), field)
        out[k] = acc
    return MatrixZSeries(a.dim, a.gram, lo, hi, out, field)


def series_identity(dim: int, gram: Matrix, lo: int, hi: int, field) -> MatrixZSeries:
    return MatrixZSeries(dim, gram, lo, hi, {0: mat_identity(dim, field)}, field)


def series_inverse(a: MatrixZSeries) -> MatrixZSeries:
    """Inverse of a triangular series (constant term must be the identity)."""
    field = a.field
    ident = mat_identity(a.dim, field)
    if not all(
        field.close(x, y) for rx, ry in zip(a.coeff(0), ident) for x, y in zip(rx, ry)
    ):
        raise QfrobError("series_inverse expects constant term 1")
    out: Dict[int, Matrix] = {0: ident}
    powers = sorted((k for k in range(a.lo, a.hi + 1) if k != 0), key=abs)
    for k in powers:
        # X_k = -sum_{j != 0} A_j X_{k-j}
        acc = mat_zero(a.dim, field)
        for j in range(a.lo, a.hi + 1):
            if j == 0:
                continue
            prev = out.get(k - j)
            aj = a.coeffs.get(j)
            if prev is None or aj is None:
                continue
            acc = mat_add(acc, mat_mul(aj, prev, field), field)
        out[k] = mat_scale(field.convert(-1), acc, field)
    return MatrixZSeries(a.dim, a.gram, a.lo, a.hi, out, field)


def symplectic_residual(t: MatrixZSeries, kind: SymplecticKind) -> MatrixZSeries:
    """T*(-z) T(z) - 1, reliable on the narrowed product window.

    Vanishing of this residual is the symplectic condition for both the
    lower family (series in 1/z) and the upper family (series in z).
    """
    if kind is SymplecticKind.LOWER and t.hi > 0:
        raise QfrobError("lower-triangular series must be supported in z^<=0")
    if kind is SymplecticKind.UPPER and t.lo < 0:
        raise QfrobError("upper-triangular series must be supported in z^>=0")
    prod = mat_multiply(t.adjoint(negate_z=True), t)
    return prod.sub_identity()


def series_exp(a: MatrixZSeries) -> MatrixZSeries:
    """exp of a series with zero constant term; exact within the window."""
    field = a.field
    if any(not field.is_zero(x) for row in a.coeff(0) for x in row):
        raise QfrobError("series_exp expects zero constant term")
    depth = max(abs(a.lo), abs(a.hi))
    result = series_identity(a.dim, a.gram, a.lo, a.hi, field)
    term = series_identity(a.dim, a.gram, a.lo, a.hi, field)
    for r in range(1, depth + 1):
        term = mat_multiply(term, a)
        result = result.add(term.scale(field.inv(field.convert(math.factorial(r)))))
    return result


def series_log(a: MatrixZSeries) -> MatrixZSeries:
    """log of a series with constant term 1; mutually inverse with series_exp."""
    field = a.field
    n = a.sub_identity()
    depth = max(abs(a.lo), abs(a.hi))
    result = MatrixZSeries(a.dim, a.gram, a.lo, a.hi, {}, field)
    term = series_identity(a.dim, a.gram, a.lo, a.hi, field)
    for r in range(1, depth + 1):
        term = mat_multiply(term, n)
        sign = field.mul(field.convert((-1) ** (r + 1)), field.inv(field.convert(r)))
        result = result.add(term.scale(sign))
    return result


def divide_by_sum(
    p: Mapping[Tuple[int, int], Matrix],
    order: int,
    dim: int,
    field,
) -> Dict[Tuple[int, int], Matrix]:
    """Solve P(x, y) = (x + y) W(x, y) for W on total degree <= order - 1.

    p maps (a, b) -> coefficient of x^a y^b, given for a + b <= order.  The
    recursion is W[a, b] = P[a+1, b] - W[a+1, b-1]; consistency requires
    P[0, 0] = 0 and P[0, b] = W[0, b-1] for all b, which is exactly the
    symplectic residual condition.  Violations raise NonSymplecticError.
    """

    def getp(a: int, b: int) -> Matrix:
        return p.get((a, b)) or mat_zero(dim, field)

    def check_zero(m: Matrix, what: str) -> None:
        bad = mat_max_abs(m, field)
        if bad > field.tol:
            raise NonSymplecticError(f"divisibility check failed at {what} (size {bad})")

    check_zero(getp(0, 0), "constant term")
    w: Dict[Tuple[int, int], Matrix] = {}
    for b in range(0, order):
        for a in range(0, order - b):
            val = getp(a + 1, b)
            if b >= 1:
                val = mat_sub(val, w[(a + 1, b - 1)], field)
            w[(a, b)] = val
        if b + 1 <= order:
            # The x^0 y^(b+1) coefficient of P must be reproduced by W.
            resid = mat_sub(getp(0, b + 1), w[(0, b)], field)
            check_zero(resid, f"x^0 y^{b + 1}")
    return w


class Polynomial:
    """Sparse polynomial in named variables with an optional total-degree cap.

    Terms are stored as {monomial: coefficient} with monomials sorted tuples
    of (variable index, exponent); zero coefficients are never stored.
    """

    __slots__ = ("names", "terms", "cap")

    def __init__(
        self,
        names: Sequence[str],
        terms: Optional[Mapping[Tuple[Tuple[int, int], ...], Any]] = None,
        cap: Optional[int] = None,
    ) -> None:
        self.names = tuple(names)
        self.cap = cap
        self.terms: Dict[Tuple[Tuple[int, int], ...], Any] = {}
        if terms:
            for mono, c in terms.items():
                self._accum(mono, c)

    def _accum(self, mono: Tuple[Tuple[int, int], ...], c: Any) -> None:
        if c == 0:
            return
        if self.cap is not None and sum(e for _, e in mono) > self.cap:
            return
        cur = self.terms.get(mono)
        new = c if cur is None else cur + c
        if new == 0:
            self.terms.pop(mono, None)
        else:
            self.terms[mono] = new

    @staticmethod
    def constant(names: Sequence[str], c: Any, cap: Optional[int] = None) -> "Polynomial":
        return Polynomial(names, {(): c}, cap)

    @staticmethod
    def variable(names: Sequence[str], idx: int, cap: Optional[int] = None) -> "Polynomial":
        return Polynomial(names, {((idx, 1),): Fraction(1)}, cap)

    def _like(self, terms: Mapping[Tuple[Tuple[int, int], ...], Any]) -> "Polynomial":
        return Polynomial(self.names, terms, self.cap)

    def __add__(self, other: Any) -> "Polynomial":
        if not isinstance(other, Polynomial):
            other = Polynomial.constant(self.names, other, self.cap)
        out = self._like(self.terms)
        for mono, c in other.terms.items():
            out._accum(mono, c)
        return out

    __radd__ = __add__

    def __neg__(self) -> "Polynomial":
        return self._like({m: -c for m, c in self.terms.items()})

    def __sub__(self, other: Any) -> "Polynomial":
        return self + (-other if isinstance(other, Polynomial) else -1 * other)

    def __rsub__(self, other: Any) -> "Polynomial":
        return (-self) + other

    def __mul__(self, other: Any) -> "Polynomial":
        if not isinstance(other, Polynomial):
            return self._like({m: c * other for m, c in self.terms.items()})
        out = self._like({})
        for m1, c1 in self.terms.items():
            for m2, c2 in other.terms.items():
                out._accum(_merge_mono(m1, m2), c1 * c2)
        return out

    __rmul__ = __mul__

    def __eq__(self, other: Any) -> bool:
        if isinstance(other, Polynomial):
            return self.terms == other.terms
        if other == 0:
            return not self.terms
        return self.terms == {(): other}

    def __hash__(self):
        return hash(frozenset(self.terms.items()))

    def diff(self, idx: int) -> "Polynomial":
        out = self._like({})
        for mono, c in self.terms.items():
            for pos, (v, e) in enumerate(mono):
                if v != idx:
                    continue
                rest = mono[:pos] + ((v, e - 1),) + mono[pos + 1:]
                rest = tuple((vv, ee) for vv, ee in rest if ee > 0)
                out._accum(rest, c * e)
        return out

    def coefficient(self, mono: Tuple[Tuple[int, int], ...]) -> Any:
        return self.terms.get(tuple(sorted(mono)), Fraction(0))

    def evaluate(self, values: Sequence[Any]) -> Any:
        total: Any = 0
        for mono, c in self.terms.items():
            term = c
            for v, e in mono:
                for _ in range(e):
                    term = term * values[v]
            total = total + term
        return total

    def max_degree(self) -> int:
        return max((sum(e for _, e in m) for m in self.terms), default=0)

    def __repr__(self) -> str:
        if not self.terms:
            return "0"
        bits = []
        for mono, c in sorted(self.terms.items()):
            vars_part = "*".join(
                f"{self.names[v]}^{e}" if e > 1 else self.names[v] for v, e in mono
            )
            bits.append(f"({c})" + ("*" + vars_part if vars_part else ""))
        return " + ".join(bits)


class PolynomialField:
    """Field-protocol wrapper around capped Polynomial arithmetic.

    Lets the matrix and z-series helpers run unchanged with truncated
    polynomial entries (jets in one variable, or Taylor germs in many).
    inv and close follow the base field; inv requires the constant term to
    be invertible there.
    """

    def __init__(self, base, names: Sequence[str], cap: int) -> None:
        if cap is None or cap < 0:
            raise QfrobError("PolynomialField needs a finite degree cap")
        self.base = base
        self.names = tuple(names)
        self.cap = cap
        self.exact = getattr(base, "exact", False)
        self.zero = Polynomial(self.names, None, cap)
        self.one = Polynomial.constant(self.names, base.one, cap)
        self.tol = base.tol

    def convert(self, x: Any) -> Polynomial:
        if isinstance(x, Polynomial):
            return x
        return Polynomial.constant(self.names, self.base.convert(x), self.cap)

    def add(self, a, b):
        return self.convert(a) + self.convert(b)

    def sub(self, a, b):
        return self.convert(a) - self.convert(b)

    def neg(self, a):
        return -self.convert(a)

    def mul(self, a, b):
        return self.convert(a) * self.convert(b)

    def inv(self, a):
        a = self.convert(a)
        c0 = self.base.convert(a.coefficient(()))
        c0i = self.base.inv(c0)
        tail = (a - c0) * c0i
        acc = self.one
        powr = self.one
        sign = 1
        for _ in range(self.cap):
            powr = powr * tail
            if powr == 0:
                break
            sign = -sign
            acc = acc + (powr if sign > 0 else -powr)
        return acc * c0i

    def constant_term(self, a):
        return self.base.convert(self.convert(a).coefficient(()))

    def magnitude(self, a):
        a = self.convert(a)
        mags = [self.base.magnitude(c) for c in a.terms.values()]
        return max(mags) if mags else self.base.magnitude(self.base.zero)

    def is_zero(self, a) -> bool:
        return all(self.base.is_zero(c) for c in self.convert(a).terms.values())

    def close(self, a, b) -> bool:
        return self.is_zero(self.sub(a, b))


def poly_exp(p: Polynomial, pf: PolynomialField) -> Polynomial:
    """exp of a capped polynomial whose constant term vanishes."""
    if not pf.base.is_zero(pf.constant_term(p)):
        raise QfrobError("poly_exp needs a vanishing constant term")
    acc = pf.one
    term = pf.one
    for j in range(1, pf.cap + 1):
        term = term * p * pf.base.inv(pf.base.convert(j))
        if term == 0:
            break
        acc = acc + term
    return acc


def poly_log_rel(p: Polynomial, pf: PolynomialField) -> Polynomial:
    """log(p / p(0)) as a capped series; p(0) must be invertible.

    The constant term of the result is zero by construction, so callers
    decide separately which branch of log p(0) to add.
    """
    c0 = pf.constant_term(p)
    tail = (p - c0) * pf.base.inv(c0)
    acc = pf.zero
    powr = pf.one
    sign = -1
    for j in range(1, pf.cap + 1):
        powr = powr * tail
        if powr == 0:
            break
        sign = -sign
        step = powr * pf.base.inv(pf.base.convert(j))
        acc = acc + (step if sign > 0 else -step)
    return acc


def _merge_mono(
    m1: Tuple[Tuple[int, int], ...], m2: Tuple[Tuple[int, int], ...]
) -> Tuple[Tuple[int, int], ...]:
    counts: Dict[int, int] = {}
    for v, e in m1:
        counts[v] = counts.get(v, 0) + e
    for v, e in m2:
        counts[v] = counts.get(v, 0) + e
    return tuple(sorted(counts.items()))
