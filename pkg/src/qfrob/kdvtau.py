"""The one-point tau-function: recursion oracle, constraint solver, Hodge twist.

Two independent routes to the same numbers:

* dvv_correlator: the double-factorial recursion that peels the largest
  insertion, seeded by <tau_0^3> = 1 and <tau_1> = 1/24.  The closed genus-0
  form (m-3)!/prod k_i! is recovered, not assumed.
* solve_tau: treats the log-table coefficients as unknowns and solves the
  lower-triangular system cut out by the constraints
  (L^_n + delta_{n,0}/16) e^F = 0, ordered by weight 2g - 2 + m.

Tables are Taylor-normalized: stored value = correlator / prod(multiplicity!).
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from .coefficients import bernoulli_number
from .fock import Caps, FockElement, FockVector, mono_counts, sort_mono, total_exp, total_log
from .quantize import (
    DarbouxFrame,
    QuantizedOperator,
    apply_quantized,
    dilaton_convert,
    series_hamiltonian,
)
from .series import Matrix, MatrixZSeries, Polynomial, mat_identity
from .coefficients import RationalField
from .virasoro import point_virasoro

_RAT = RationalField()

CACHE_VERSION = "1"


def _double_factorial(n: int) -> int:
    # (-1)!! = 1 by convention.
    out = 1
    while n > 1:
        out *= n
        n -= 2
    return out


@lru_cache(maxsize=None)
def _ordered_splits(
    rest: Tuple[int, ...]
) -> Tuple[Tuple[Tuple[int, ...], Tuple[int, ...], int], ...]:
    # Ordered splits (part, complement, multiplicity) of a sorted tuple; the
    # multiplicity counts the ways to distribute labeled points with these
    # insertion values: prod binomial(count, taken).
    values = sorted(set(rest))
    splits: List[Tuple[Tuple[int, ...], Tuple[int, ...], int]] = [((), (), 1)]
    for v in values:
        c = rest.count(v)
        nxt = []
        for part, comp, mult in splits:
            for take in range(c + 1):
                nxt.append((
                    part + (v,) * take,
                    comp + (v,) * (c - take),
                    mult * math.comb(c, take),
                ))
        splits = nxt
    return tuple(splits)


@lru_cache(maxsize=None)
def _dvv(g: int, ks: Tuple[int, ...]) -> Fraction:
    m = len(ks)
    if g < 0 or any(k < 0 for k in ks):
        return Fraction(0)
    if sum(ks) != 3 * g - 3 + m:
        return Fraction(0)
    if g == 0 and ks == (0, 0, 0):
        return Fraction(1)
    if g == 1 and ks == (1,):
        return Fraction(1, 24)
    top = max(ks) if ks else 0
    if top == 0:
        return Fraction(0)
    # Peel tau_{k+1} with k + 1 = top.
    k = top - 1
    idx = ks.index(top)
    rest = ks[:idx] + ks[idx + 1:]
    total = Fraction(0)
    for j, kj in enumerate(rest):
        other = rest[:j] + rest[j + 1:]
        num = _double_factorial(2 * k + 2 * kj + 1)
        den = _double_factorial(2 * kj - 1)
        total += Fraction(num, den) * _dvv(g, tuple(sorted(other + (k + kj,))))
    for a in range(k):
        b = k - 1 - a
        w = Fraction(_double_factorial(2 * a + 1) * _double_factorial(2 * b + 1), 2)
        total += w * _dvv(g - 1, tuple(sorted(rest + (a, b))))
        for part, comp, mult in _ordered_splits(rest):
            for g1 in range(g + 1):
                left = _dvv(g1, tuple(sorted(part + (a,))))
                if left == 0:
                    continue
                total += w * mult * left * _dvv(g - g1, tuple(sorted(comp + (b,))))
    return total / _double_factorial(2 * k + 3)


def dvv_correlator(g: int, ks: Sequence[int]) -> Fraction:
    """Intersection number <tau_{k_1} ... tau_{k_m}>_g (0 off dimension)."""
    return _dvv(g, tuple(sorted(ks)))


def _ascending_tuples(m: int, total: int, floor: int = 0) -> Iterable[Tuple[int, ...]]:
    if m == 0:
        if total == 0:
            yield ()
        return
    if m == 1:
        if total >= floor:
            yield (total,)
        return
    first = floor
    while first * m <= total:
        for rest in _ascending_tuples(m - 1, total - first, first):
            yield (first,) + rest
        first += 1


def _weight_keys(w: int) -> List[Tuple[int, Tuple[int, ...]]]:
    """All stable (g, sorted k-tuple) with 2g - 2 + m = w and the dimension rule."""
    out: List[Tuple[int, Tuple[int, ...]]] = []
    for g in range(w // 2 + 2):
        m = w + 2 - 2 * g
        if m < 0 or (g, m) in {(0, 0), (0, 1), (0, 2), (1, 0)}:
            continue
        total = 3 * g - 3 + m
        if total < 0:
            continue
        for ks in _ascending_tuples(m, total):
            out.append((g, ks))
    return out


def _point_constant_factor(n: int) -> Fraction:
    # Coefficient of q_1 d_{n+1} in L^_n: prod_{j=0}^{n} (3/2 + j).
    out = Fraction(1)
    for j in range(n + 1):
        out *= Fraction(3, 2) + j
    return out


def _with_scalar(op: QuantizedOperator, c: Fraction) -> QuantizedOperator:
    if c == 0:
        return op
    return QuantizedOperator(
        op.dd, op.qd, op.qq, op.lone_d, op.lone_q,
        op.scalar + c, op.scalar_hinv, op.coords,
    )


@lru_cache(maxsize=None)
def solve_tau_full(w_max: int, cache_dir: Optional[str] = None) -> FockElement:
    """Solve the constraint hierarchy for all keys of weight <= w_max.

    No seed values enter: the weight-1 stratum already pins the coefficients
    of t_0^3 and t_1 (1/6 and 1/24), and each later key K is solved from the
    residual of L^_{min(K)-1} at the key with one minimal insertion removed.
    """
    if cache_dir:
        cached = TauTable.load(cache_dir, w_max)
        if cached is not None:
            return cached
    caps = Caps(g_max=w_max // 2 + 1, m_max=w_max + 2, k_max=2 * w_max + 2)
    f = FockElement(1, caps, None, "t")
    for w in range(1, w_max + 1):
        for g, ks in _weight_keys(w):
            n = min(ks) - 1
            rest = list(ks)
            rest.remove(n + 1)
            jmono = sort_mono([(k, 0) for k in rest])
            lop = point_virasoro(n, max(ks) + abs(n) + 1)
            op_t = _with_scalar(
                dilaton_convert(lop.op, (Fraction(1),), "to_t"), lop.constant
            )
            res = apply_quantized(op_t, f, "log", [(g, jmono)])
            other = res.get(g, jmono)
            value = other / (_point_constant_factor(n) * ks.count(n + 1))
            if value != 0:
                f.set(g, [(k, 0) for k in ks], value)
    if cache_dir:
        TauTable.store(cache_dir, w_max, f)
    return f


def solve_tau(caps: Caps, cache_dir: Optional[str] = None) -> FockElement:
    """Tau-function log table truncated to caps (dimension 1, t-chart)."""
    w_max = 2 * caps.g_max - 2 + caps.m_max
    return solve_tau_full(w_max, cache_dir).truncate(caps)


class TauTable:
    """Flat JSON cache for solved tables, keyed by weight bound and version."""

    @staticmethod
    def _path(cache_dir: str, w_max: int) -> str:
        return os.path.join(cache_dir, f"tau_v{CACHE_VERSION}_w{w_max}.json")

    @staticmethod
    def load(cache_dir: str, w_max: int) -> Optional[FockElement]:
        path = TauTable._path(cache_dir, w_max)
        if not os.path.exists(path):
            return None
        try:
            with open(path, "r", encoding="utf-8") as fh:
                blob = json.load(fh)
            if blob.get("version") != CACHE_VERSION or blob.get("w_max") != w_max:
                return None
            caps = Caps(**blob["caps"])
            f = FockElement(1, caps, None, "t")
            for item in blob["entries"]:
                mono = [(k, a) for k, a in item["mono"]]
                f.set(item["g"], mono, Fraction(item["value"]))
            return f
        except (OSError, ValueError, KeyError):
            return None

    @staticmethod
    def store(cache_dir: str, w_max: int, f: FockElement) -> None:
        os.makedirs(cache_dir, exist_ok=True)
        entries = [
            {"g": g, "mono": [list(ins) for ins in mono], "value": str(value)}
            for (g, mono), value in sorted(f.table.items())
        ]
        blob = {
            "version": CACHE_VERSION,
            "w_max": w_max,
            "caps": {"g_max": f.caps.g_max, "m_max": f.caps.m_max, "k_max": f.caps.k_max},
            "entries": entries,
        }
        with open(TauTable._path(cache_dir, w_max), "w", encoding="utf-8") as fh:
            json.dump(blob, fh, indent=0, sort_keys=True)


def tau_correlator(f: FockElement, g: int, ks: Sequence[int]) -> Fraction:
    """Read <tau_{k_1}...tau_{k_m}>_g back out of a solved table."""
    mono = sort_mono([(k, 0) for k in ks])
    value = f.get(g, mono)
    for c in mono_counts(mono).values():
        value = value * math.factorial(c)
    return value


# ---------------------------------------------------------------------------
# Hodge deformation


@dataclass(frozen=True)
class HodgeParameters:
    """Formal deformation parameters s_1..s_{j_max} kept to total degree deg_s."""

    j_max: int = 2
    deg_s: int = 2

    def names(self) -> Tuple[str, ...]:
        return tuple(f"s{j}" for j in range(1, self.j_max + 1))


def _bernoulli_weight(k: int) -> Fraction:
    return bernoulli_number(2 * k) / math.factorial(2 * k)


def odd_power_generator(k: int, dim: int, gram: Matrix, k_max: int) -> QuantizedOperator:
    """Quantized generator of the z^{2k-1} deformation direction.

    Multiplication by an odd power of z is infinitesimally symplectic; the
    generator used here is minus the quantized pairing-quadratic of that
    symbol, oriented so the genus-1 linear response is +1/24.
    """
    frame = DarbouxFrame(dim, gram, k_max)
    power = 2 * k - 1
    a = MatrixZSeries(dim, gram, 0, power, {power: mat_identity(dim, _RAT)}, _RAT)
    h = series_hamiltonian(a, frame)
    return QuantizedOperator(
        {key: -c for key, c in h.pp.items()},
        {key: -c for key, c in h.pq.items()},
        {key: -c for key, c in h.qq.items()},
        {}, {}, Fraction(0), Fraction(0), "q",
    )


def hodge_deform(
    f: FockElement,
    params: HodgeParameters,
    gram: Optional[Matrix] = None,
    vec: Optional[Sequence[Any]] = None,
    w_max: Optional[int] = None,
) -> FockElement:
    """Deformed log table with polynomial-in-s coefficients.

    Applies exp(sum_k s_k B_{2k}/(2k)! G_k) to the exponential of f, where
    G_k generates the z^{2k-1} direction, then takes the log again.  The
    input table sits in the dilaton-shifted t-chart (vec defaults to the
    unit vector), so the generators are converted before acting.

    Each flow step can consume one unit of weight 2g - 2 + m (the converted
    generator contains a lone derivative), so entries of the result are only
    complete up to weight w_max - deg_s; use hodge_deformed_tau for a window
    that is padded and re-truncated automatically.
    """
    names = params.names()
    if gram is None:
        gram = mat_identity(f.dim, _RAT)
    if vec is None:
        vec = tuple(Fraction(1) if a == 0 else Fraction(0) for a in range(f.dim))
    if w_max is None:
        w_max = 2 * f.caps.g_max - 2 + f.caps.m_max
    k_need = max(k for (_, mono) in f.table for (k, _) in mono) if f.table else 0
    k_need += 2 * params.j_max

    def poly_const(c: Any) -> Polynomial:
        return Polynomial.constant(names, c, params.deg_s)

    total: Optional[QuantizedOperator] = None
    for j in range(1, params.j_max + 1):
        op = odd_power_generator(j, f.dim, gram, k_need)
        s_j = Polynomial.variable(names, j - 1, params.deg_s)
        piece = op.scaled(s_j * _bernoulli_weight(j))
        total = piece if total is None else total.plus(piece)
    op_t = dilaton_convert(total, vec, "to_t")

    v = total_exp(f, w_max)
    out = FockVector(
        f.dim, f.caps, {key: poly_const(c) for key, c in v.table.items()}, f.coords
    )
    term = out.copy()
    for r in range(1, params.deg_s + 1):
        term = apply_quantized(op_t, term, "vector")
        inv_r = Fraction(1, r)
        term.table = {key: c * inv_r for key, c in term.table.items()}
        for (h, mono), c in term.table.items():
            out.add(h, mono, c)
    return total_log(out, w_max)


def hodge_deformed_tau(
    caps: Caps,
    params: HodgeParameters,
    cache_dir: Optional[str] = None,
) -> FockElement:
    """Hodge-deformed one-point table, complete on every key admitted by caps.

    The underlying table is solved with deg_s extra units of weight so that
    the flow never reads past solved data; the result is truncated back.
    """
    w_int = 2 * caps.g_max - 2 + caps.m_max + params.deg_s
    full = solve_tau_full(w_int, cache_dir)
    window = Caps(
        g_max=w_int // 2 + 1,
        m_max=caps.m_max + 2 * params.deg_s,
        k_max=caps.k_max + (2 * params.j_max - 1) * params.deg_s,
    )
    deformed = hodge_deform(full.truncate(window), params, w_max=w_int)
    return deformed.truncate(caps)


def hodge_integral(
    deformed: FockElement,
    g: int,
    s_exponents: Sequence[int],
    ks: Sequence[int],
) -> Fraction:
    """Hodge integral <prod ch_{2j-1}^{e_j} prod tau_{k_i}>_g from a deformed table.

    s_exponents lists e_1..e_j; the generating exponential contributes
    s^e/e! per direction, so the stored polynomial coefficient is rescaled
    by prod e_j! (and the tau multiplicities, as in any correlator).
    """
    mono = sort_mono([(k, 0) for k in ks])
    stored = deformed.get(g, mono)
    if isinstance(stored, Polynomial):
        target = tuple((j, e) for j, e in enumerate(s_exponents) if e)
        value = stored.coefficient(target)
    elif all(e == 0 for e in s_exponents):
        value = stored
    else:
        return Fraction(0)
    for e in s_exponents:
        value = value * math.factorial(e)
    for c in mono_counts(mono).values():
        value = value * math.factorial(c)
    return value
