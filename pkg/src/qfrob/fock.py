"""Genus-graded coefficient tables for total potentials.

A FockElement stores the logarithm of a total potential: the coefficient of
hbar^{g-1} * prod_i t_{k_i}^{a_i} is kept under the key (g, mono) where mono
is the sorted tuple of insertions (k_i, a_i).  A FockVector stores the
expansion of the exponential itself, keyed by (hbar power, mono).

The slots (g, m) in {(0,0), (0,1), (0,2), (1,0)} are "unstable": they may be
stored (group actions create them) but they never count as part of a valid
potential, and exponentiation refuses tables that populate them, since the
weight 2g - 2 + m >= 1 of every stable term is what keeps exponentials and
logarithms finite.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from itertools import product as iproduct
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .coefficients import coeff_from_json, coeff_to_json
from .errors import CapExceededError, GradingError, QfrobError

Insertion = Tuple[int, int]
Mono = Tuple[Insertion, ...]
LogKey = Tuple[int, Mono]

UNSTABLE = {(0, 0), (0, 1), (0, 2), (1, 0)}


@dataclass(frozen=True)
class Caps:
    """Truncation bounds: genus <= g_max, insertions <= m_max, levels <= k_max."""

    g_max: int
    m_max: int
    k_max: int

    def admits(self, g: int, mono: Mono) -> bool:
        return (
            0 <= g <= self.g_max
            and len(mono) <= self.m_max
            and all(0 <= k <= self.k_max for k, _ in mono)
        )


def sort_mono(ins: Iterable[Insertion]) -> Mono:
    return tuple(sorted(ins))


def mono_counts(mono: Mono) -> Dict[Insertion, int]:
    out: Dict[Insertion, int] = {}
    for v in mono:
        out[v] = out.get(v, 0) + 1
    return out


def mono_remove(mono: Mono, v: Insertion, times: int = 1) -> Mono:
    left = times
    out: List[Insertion] = []
    for w in mono:
        if left and w == v:
            left -= 1
            continue
        out.append(w)
    if left:
        raise QfrobError(f"{v} does not occur {times} times in {mono}")
    return tuple(out)


def mono_add(mono: Mono, v: Insertion, times: int = 1) -> Mono:
    return sort_mono(mono + (v,) * times)


def stable(g: int, m: int) -> bool:
    return (g, m) not in UNSTABLE


def weight(g: int, mono: Mono) -> int:
    return 2 * g - 2 + len(mono)


class FockElement:
    """Log-form table of a total potential over an N-dimensional target."""

    def __init__(
        self,
        dim: int,
        caps: Caps,
        table: Optional[Mapping[LogKey, Any]] = None,
        coords: str = "t",
    ) -> None:
        if coords not in ("t", "q"):
            raise QfrobError(f"coords must be 't' or 'q', got {coords!r}")
        self.dim = dim
        self.caps = caps
        self.coords = coords
        self.table: Dict[LogKey, Any] = {}
        if table:
            for (g, mono), c in table.items():
                self.set(g, mono, c)

    def copy(self) -> "FockElement":
        out = FockElement(self.dim, self.caps, None, self.coords)
        out.table = dict(self.table)
        return out

    def _check_key(self, g: int, mono: Mono) -> Mono:
        mono = sort_mono(mono)
        for k, a in mono:
            if not (0 <= a < self.dim):
                raise QfrobError(f"direction index {a} outside dimension {self.dim}")
            if k < 0:
                raise QfrobError(f"negative descendent level {k}")
        return mono

    def set(self, g: int, mono: Iterable[Insertion], c: Any) -> None:
        mono = self._check_key(g, tuple(mono))
        if c == 0:
            self.table.pop((g, mono), None)
        else:
            self.table[(g, mono)] = c

    def add(self, g: int, mono: Iterable[Insertion], c: Any) -> None:
        mono = self._check_key(g, tuple(mono))
        cur = self.table.get((g, mono))
        new = c if cur is None else cur + c
        if new == 0:
            self.table.pop((g, mono), None)
        else:
            self.table[(g, mono)] = new

    def get(self, g: int, mono: Iterable[Insertion]) -> Any:
        return self.table.get((g, sort_mono(tuple(mono))), Fraction(0))

    def stable_part(self) -> "FockElement":
        out = self.copy()
        out.table = {
            (g, mono): c
            for (g, mono), c in self.table.items()
            if stable(g, len(mono))
        }
        return out

    def truncate(self, caps: Caps) -> "FockElement":
        out = FockElement(self.dim, caps, None, self.coords)
        out.table = {
            (g, mono): c for (g, mono), c in self.table.items() if caps.admits(g, mono)
        }
        return out

    def prune(self, field) -> "FockElement":
        out = self.copy()
        out.table = {k: c for k, c in self.table.items() if not field.is_zero(c)}
        return out

    def __eq__(self, other: Any) -> bool:
        return (
            isinstance(other, FockElement)
            and self.dim == other.dim
            and self.coords == other.coords
            and self.table == other.table
        )


def correlator(f: FockElement, g: int, insertions: Iterable[Insertion]) -> Any:
    """Correlator value: the stored Taylor coefficient times prod (mult!)."""
    mono = sort_mono(tuple(insertions))
    c = f.get(g, mono)
    factor = 1
    for n in mono_counts(mono).values():
        factor *= math.factorial(n)
    return c * factor


class FockVector:
    """Exponential-form table keyed by (hbar power, mono)."""

    def __init__(
        self,
        dim: int,
        caps: Caps,
        table: Optional[Mapping[Tuple[int, Mono], Any]] = None,
        coords: str = "t",
    ) -> None:
        self.dim = dim
        self.caps = caps
        self.coords = coords
        self.table: Dict[Tuple[int, Mono], Any] = dict(table or {})

    def copy(self) -> "FockVector":
        return FockVector(self.dim, self.caps, dict(self.table), self.coords)

    def add(self, h: int, mono: Mono, c: Any) -> None:
        key = (h, sort_mono(mono))
        cur = self.table.get(key)
        new = c if cur is None else cur + c
        if new == 0:
            self.table.pop(key, None)
        else:
            self.table[key] = new


def total_exp(f: FockElement, w_max: Optional[int] = None) -> FockVector:
    """Graded exponential of a log table.

    Every contributing term must be stable; the result is complete for keys
    of weight 2h + m <= w_max (default 2 g_max - 2 + m_max from the caps).
    """
    if w_max is None:
        w_max = 2 * f.caps.g_max - 2 + f.caps.m_max
    for (g, mono), c in f.table.items():
        if not stable(g, len(mono)) and c != 0:
            raise GradingError(f"total_exp on unstable slot {(g, len(mono))}")
    m_cap = f.caps.m_max
    out = FockVector(f.dim, f.caps, {(0, ()): Fraction(1)}, f.coords)
    # Multiply in e^{F} = sum_r F^r / r! graded by weight.
    power = FockVector(f.dim, f.caps, {(0, ()): Fraction(1)}, f.coords)
    r = 0
    while True:
        r += 1
        nxt = FockVector(f.dim, f.caps, None, f.coords)
        for (h1, k1), c1 in power.table.items():
            for (g2, k2), c2 in f.table.items():
                h = h1 + g2 - 1
                mono = sort_mono(k1 + k2)
                if 2 * h + len(mono) > w_max or len(mono) > m_cap:
                    continue
                nxt.add(h, mono, c1 * c2)
        power = nxt
        if not power.table:
            break
        inv_fact = Fraction(1, math.factorial(r))
        for (h, mono), c in power.table.items():
            out.add(h, mono, c * inv_fact)
        if r > w_max:
            break
    return out


def total_log(v: FockVector, w_max: Optional[int] = None) -> FockElement:
    """Graded logarithm, inverse to total_exp on its completeness window."""
    if w_max is None:
        w_max = 2 * v.caps.g_max - 2 + v.caps.m_max
    base = v.table.get((0, ()))
    if base is None or base != 1:
        raise GradingError("total_log expects leading coefficient 1 at (hbar^0, empty)")
    rest = {key: c for key, c in v.table.items() if key != (0, ())}
    m_cap = v.caps.m_max
    out = FockElement(v.dim, v.caps, None, v.coords)
    power: Dict[Tuple[int, Mono], Any] = {(0, ()): Fraction(1)}
    r = 0
    while True:
        r += 1
        nxt: Dict[Tuple[int, Mono], Any] = {}
        for (h1, k1), c1 in power.items():
            for (h2, k2), c2 in rest.items():
                h = h1 + h2
                mono = sort_mono(k1 + k2)
                if 2 * h + len(mono) > w_max or len(mono) > m_cap:
                    continue
                key = (h, mono)
                cur = nxt.get(key)
                val = c1 * c2 if cur is None else cur + c1 * c2
                if val == 0:
                    nxt.pop(key, None)
                else:
                    nxt[key] = val
        power = nxt
        if not power:
            break
        sign = Fraction((-1) ** (r + 1), r)
        for (h, mono), c in power.items():
            out.add(h + 1, mono, c * sign)
        if r > w_max:
            break
    return out


def substitute_linear(
    f: FockElement,
    sub: Mapping[Insertion, Tuple[Mapping[Insertion, Any], Any]],
    truncate: bool = False,
) -> FockElement:
    """Affine substitution t_v -> sum_w A[v][w] t_w + b[v] on a log table.

    Variables absent from sub are left alone.  Substitution targets beyond
    the caps raise CapExceededError unless truncate=True, in which case the
    offending terms are silently dropped.
    """
    caps = f.caps
    for v, (lin, _) in sub.items():
        for w in lin:
            if w[0] > caps.k_max and not truncate:
                raise CapExceededError(
                    f"substitution target level {w[0]} beyond k_max={caps.k_max}"
                )
    out = FockElement(f.dim, caps, None, f.coords)
    for (g, mono), c in f.table.items():
        # Expand the product over insertions of (linear part + constant).
        expanded: Dict[Mono, Any] = {(): c}
        for v in mono:
            rule = sub.get(v)
            if rule is None:
                expanded = {mono_add(m, v): cc for m, cc in expanded.items()}
                continue
            lin, const = rule
            nxt: Dict[Mono, Any] = {}
            for m, cc in expanded.items():
                if const != 0:
                    key = m
                    cur = nxt.get(key)
                    val = cc * const if cur is None else cur + cc * const
                    nxt[key] = val
                for w, a in lin.items():
                    if w[0] > caps.k_max:
                        continue
                    key = mono_add(m, w)
                    cur = nxt.get(key)
                    val = cc * a if cur is None else cur + cc * a
                    nxt[key] = val
            expanded = nxt
        for m, cc in expanded.items():
            if len(m) <= caps.m_max:
                out.add(g, m, cc)
            elif not truncate:
                raise CapExceededError(
                    f"substitution produced {len(m)} insertions beyond m_max={caps.m_max}"
                )
    return out


def shift_absorb(f: FockElement, shifts: Mapping[Insertion, Any]) -> FockElement:
    """Evaluate F(t + shift) for a constant shift supported on given slots.

    The sum over extra insertions is finite because the stored table is;
    the caller is responsible for the table actually being closed under the
    relevant dimension count (true for tau-type tables when every shifted
    slot has level >= 2).
    """
    out = FockElement(f.dim, f.caps, None, f.coords)
    for (g, mono), c in f.table.items():
        counts = mono_counts(mono)
        shifted = [v for v in counts if v in shifts]
        ranges = [range(counts[v] + 1) for v in shifted]
        for choice in iproduct(*ranges) if shifted else [()]:
            factor = c
            newmono = mono
            for v, r in zip(shifted, choice):
                if r == 0:
                    continue
                factor = factor * math.comb(counts[v], r) * shifts[v] ** r
                newmono = mono_remove(newmono, v, r)
            if factor != 0:
                out.add(g, newmono, factor)
    return out


def fock_to_json(f: FockElement) -> str:
    entries = []
    for (g, mono), c in sorted(f.table.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        entries.append(
            {
                "g": g,
                "insertions": [[k, a] for k, a in mono],
                "value": coeff_to_json(c),
            }
        )
    doc = {
        "dim": f.dim,
        "coords": f.coords,
        "caps": {"g_max": f.caps.g_max, "m_max": f.caps.m_max, "k_max": f.caps.k_max},
        "entries": entries,
    }
    return json.dumps(doc, indent=1, sort_keys=True)


def fock_from_json(text: str) -> FockElement:
    doc = json.loads(text)
    caps = Caps(**doc["caps"])
    f = FockElement(doc["dim"], caps, None, doc["coords"])
    for e in doc["entries"]:
        mono = tuple((int(k), int(a)) for k, a in e["insertions"])
        f.set(int(e["g"]), mono, coeff_from_json(e["value"]))
    return f


def fock_to_csv(f: FockElement) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["g", "levels", "directions", "value"])
    for (g, mono), c in sorted(f.table.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        levels = " ".join(str(k) for k, _ in mono)
        dirs = " ".join(str(a) for _, a in mono)
        val = coeff_to_json(c)
        if isinstance(val, dict):
            val = f"{val['re']}+{val['im']}j@{val['precision']}"
        writer.writerow([g, levels, dirs, val])
    return buf.getvalue()
