"""Quadratic hamiltonians on the loop space and their quantization.

The symplectic form used throughout is
    Omega(f, g) = sum_k (-1)^{k+1} (f_k, g_{-1-k})
on vector Laurent polynomials f = sum f_k z^k, with ( , ) the target pairing.
In Darboux form f = sum q_k z^k + sum p_k (-z)^{-1-k} with p_k written in the
dual basis.  An infinitesimal symplectic operator A (one with A*(-z) = -A(z))
has the hamiltonian h_A(f) = Omega(A f, f)/2, and quantization sends
    (p_I p_J)^ = hbar d_I d_J,   (p_I q_J)^ = q_J d_I,   (q_I q_J)^ = q_I q_J / hbar.

Operators are represented three ways: as QuadHamiltonian coefficient tables,
as QuantizedOperator (the quantized form plus lone and scalar terms), and as
normal-ordered Weyl polynomials used to compute commutators exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field
from fractions import Fraction
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from .coefficients import RationalField
from .errors import CapExceededError, NonSymplecticError, QfrobError
from .fock import (
    Caps,
    FockElement,
    FockVector,
    Insertion,
    Mono,
    mono_add,
    mono_counts,
    mono_remove,
    shift_absorb,
    sort_mono,
    substitute_linear,
)
from .series import (
    Matrix,
    MatrixZSeries,
    divide_by_sum,
    mat_identity,
    mat_inv,
    mat_mul,
    mat_scale,
    mat_sub,
    mat_transpose,
    mat_vec,
    mat_zero,
    series_inverse,
)

VarTag = Tuple[str, int, int]  # ('q' | 'p', level, direction)
PairKey = Tuple[Insertion, Insertion]


@dataclass(frozen=True)
class DarbouxFrame:
    """Finite window of Darboux coordinates q_{k,a}, p_{k,a} with k <= k_max."""

    dim: int
    gram: Matrix
    k_max: int
    field: Any = dc_field(default_factory=RationalField)

    def gram_inv(self) -> Matrix:
        return mat_inv(self.gram, self.field)


def _pair(i: Insertion, j: Insertion) -> PairKey:
    return (i, j) if i <= j else (j, i)


@dataclass
class QuadHamiltonian:
    """h = sum_{I<=J} pp[I,J] p_I p_J + sum pq[I,J] p_I q_J + sum_{I<=J} qq[I,J] q_I q_J."""

    pp: Dict[PairKey, Any]
    pq: Dict[PairKey, Any]
    qq: Dict[PairKey, Any]

    @staticmethod
    def zero() -> "QuadHamiltonian":
        return QuadHamiltonian({}, {}, {})

    def _store(self, table: Dict, key, c) -> None:
        cur = table.get(key)
        new = c if cur is None else cur + c
        if new == 0:
            table.pop(key, None)
        else:
            table[key] = new

    def add_pp(self, i: Insertion, j: Insertion, c: Any) -> None:
        self._store(self.pp, _pair(i, j), c)

    def add_pq(self, i: Insertion, j: Insertion, c: Any) -> None:
        self._store(self.pq, (i, j), c)

    def add_qq(self, i: Insertion, j: Insertion, c: Any) -> None:
        self._store(self.qq, _pair(i, j), c)

    def scaled(self, c: Any) -> "QuadHamiltonian":
        return QuadHamiltonian(
            {k: c * v for k, v in self.pp.items()},
            {k: c * v for k, v in self.pq.items()},
            {k: c * v for k, v in self.qq.items()},
        )

    def plus(self, other: "QuadHamiltonian") -> "QuadHamiltonian":
        out = QuadHamiltonian(dict(self.pp), dict(self.pq), dict(self.qq))
        for k, v in other.pp.items():
            out._store(out.pp, k, v)
        for k, v in other.pq.items():
            out._store(out.pq, k, v)
        for k, v in other.qq.items():
            out._store(out.qq, k, v)
        return out

    def restrict(self, k_max: int) -> "QuadHamiltonian":
        def keep(table):
            return {
                (i, j): c for (i, j), c in table.items() if i[0] <= k_max and j[0] <= k_max
            }

        return QuadHamiltonian(keep(self.pp), keep(self.pq), keep(self.qq))


def hamiltonian_of(
    apply_basis: Callable[[int], Mapping[int, Matrix]],
    frame: DarbouxFrame,
    band: int,
) -> QuadHamiltonian:
    """Quadratic hamiltonian Omega(A f, f)/2 of a banded Laurent operator.

    apply_basis(k) describes A on the coefficient of z^k as a map
    {output power: matrix}; |output - input| must stay within band.  The
    returned tables are complete for variable levels up to frame.k_max.
    """
    field = frame.field
    n = frame.dim
    ginv = frame.gram_inv()
    k_int = frame.k_max + band

    # Linear forms: {VarTag: coefficient}; one vector of forms per z-slot.
    f_slots: Dict[int, List[Dict[VarTag, Any]]] = {}
    for k in range(0, k_int + 1):
        f_slots[k] = [{("q", k, b): field.one} for b in range(n)]
        sign = field.convert((-1) ** (1 + k))
        f_slots[-1 - k] = [
            {
                ("p", k, a): field.mul(sign, ginv[b][a])
                for a in range(n)
                if not field.is_zero(ginv[b][a])
            }
            for b in range(n)
        ]

    g_slots: Dict[int, List[Dict[VarTag, Any]]] = {}
    for j, forms in f_slots.items():
        for out_j, mat in apply_basis(j).items():
            if abs(out_j - j) > band:
                raise QfrobError("apply_basis output exceeds declared band")
            tgt = g_slots.setdefault(out_j, [dict() for _ in range(n)])
            for b in range(n):
                for a in range(n):
                    c = mat[b][a]
                    if field.is_zero(c):
                        continue
                    for tag, coeff in forms[a].items():
                        cur = tgt[b].get(tag, field.zero)
                        tgt[b][tag] = field.add(cur, field.mul(c, coeff))

    quad: Dict[Tuple[VarTag, VarTag], Any] = {}

    def accum(t1: VarTag, t2: VarTag, c: Any) -> None:
        key = (t1, t2) if t1 <= t2 else (t2, t1)
        cur = quad.get(key, field.zero)
        new = field.add(cur, c)
        if field.is_zero(new):
            quad.pop(key, None)
        else:
            quad[key] = new

    half = field.inv(field.convert(2))
    for j, gforms in g_slots.items():
        fforms = f_slots.get(-1 - j)
        if fforms is None:
            continue
        sign = field.convert(-1 if (j + 1) % 2 else 1)
        outer = field.mul(half, sign)
        for a in range(n):
            for b in range(n):
                gram_ab = frame.gram[a][b]
                if field.is_zero(gram_ab):
                    continue
                w = field.mul(outer, gram_ab)
                for t1, c1 in gforms[a].items():
                    for t2, c2 in fforms[b].items():
                        accum(t1, t2, field.mul(w, field.mul(c1, c2)))

    h = QuadHamiltonian.zero()
    for (t1, t2), c in quad.items():
        kind1, k1, a1 = t1
        kind2, k2, a2 = t2
        if k1 > frame.k_max or k2 > frame.k_max:
            continue
        i1, i2 = (k1, a1), (k2, a2)
        if kind1 == "p" and kind2 == "p":
            h.add_pp(i1, i2, c)
        elif kind1 == "q" and kind2 == "q":
            h.add_qq(i1, i2, c)
        elif kind1 == "p" and kind2 == "q":
            h.add_pq(i1, i2, c)
        else:
            h.add_pq(i2, i1, c)
    return h


def series_apply_basis(a: MatrixZSeries) -> Callable[[int], Mapping[int, Matrix]]:
    def apply_basis(k: int) -> Mapping[int, Matrix]:
        return {k + j: m for j, m in a.coeffs.items()}

    return apply_basis


def series_hamiltonian(a: MatrixZSeries, frame: DarbouxFrame) -> QuadHamiltonian:
    band = max(abs(a.lo), abs(a.hi))
    return hamiltonian_of(series_apply_basis(a), frame, band)


def infinitesimal_residual(a: MatrixZSeries) -> MatrixZSeries:
    """A*(-z) + A(z); zero exactly when A is infinitesimally symplectic."""
    neg = a.adjoint(negate_z=True)
    out: Dict[int, Matrix] = dict(neg.coeffs)
    for k, m in a.coeffs.items():
        cur = out.get(k)
        out[k] = m if cur is None else mat_sub(m, mat_scale(a.field.convert(-1), cur, a.field), a.field)
    return MatrixZSeries(a.dim, a.gram, a.lo, a.hi, out, a.field)


def verify_string_invariance(
    u_values: Sequence[Any],
    f: FockElement,
    delta_vec: Sequence[Any],
    out_keys: Optional[Iterable[Tuple[int, Mono]]] = None,
) -> FockElement:
    """Residual of the quantized (U/z) operator on a canonical-frame table.

    u_values are the diagonal entries of U; the frame pairing is the
    identity, each block carrying its own string hamiltonian
    u_i (q_{0,i}^2/2 + sum_m q_{m+1,i} p_{m,i}).  delta_vec is the dilaton
    vector of the table's t-chart.  A vanishing residual certifies that the
    e^{(U/z)^} factor may be omitted from assembled potentials.
    """
    op = QuantizedOperator.zero("q")
    for i, u in enumerate(u_values):
        if u == 0:
            continue
        op.qq[((0, i), (0, i))] = u * Fraction(1, 2)
        for m in range(0, f.caps.k_max):
            op.qd[((m, i), (m + 1, i))] = u
    op = dilaton_convert(op, delta_vec, "to_t")
    return apply_quantized(op, f, "log", out_keys)


@dataclass
class QuantizedOperator:
    """Quantized quadratic hamiltonian plus affine and scalar parts.

    dd[I,J]: coefficient of hbar d_I d_J          (I <= J)
    qd[I,J]: coefficient of q_J d_I
    qq[I,J]: coefficient of q_I q_J / hbar        (I <= J)
    lone_d[I]: coefficient of d_I
    lone_q[I]: coefficient of q_I / hbar
    scalar, scalar_hinv: constants (the latter divided by hbar)
    """

    dd: Dict[PairKey, Any]
    qd: Dict[PairKey, Any]
    qq: Dict[PairKey, Any]
    lone_d: Dict[Insertion, Any]
    lone_q: Dict[Insertion, Any]
    scalar: Any
    scalar_hinv: Any
    coords: str = "q"

    @staticmethod
    def zero(coords: str = "q") -> "QuantizedOperator":
        return QuantizedOperator({}, {}, {}, {}, {}, Fraction(0), Fraction(0), coords)

    def scaled(self, c: Any) -> "QuantizedOperator":
        return QuantizedOperator(
            {k: c * v for k, v in self.dd.items()},
            {k: c * v for k, v in self.qd.items()},
            {k: c * v for k, v in self.qq.items()},
            {k: c * v for k, v in self.lone_d.items()},
            {k: c * v for k, v in self.lone_q.items()},
            c * self.scalar,
            c * self.scalar_hinv,
            self.coords,
        )

    def plus(self, other: "QuantizedOperator") -> "QuantizedOperator":
        if self.coords != other.coords:
            raise QfrobError("cannot add operators in different coordinates")

        def merge(a: Dict, b: Dict) -> Dict:
            out = dict(a)
            for k, v in b.items():
                cur = out.get(k)
                new = v if cur is None else cur + v
                if new == 0:
                    out.pop(k, None)
                else:
                    out[k] = new
            return out

        return QuantizedOperator(
            merge(self.dd, other.dd),
            merge(self.qd, other.qd),
            merge(self.qq, other.qq),
            merge(self.lone_d, other.lone_d),
            merge(self.lone_q, other.lone_q),
            self.scalar + other.scalar,
            self.scalar_hinv + other.scalar_hinv,
            self.coords,
        )

    def max_level_shift(self) -> int:
        """Largest k-index appearing anywhere; used to pick safe windows."""
        ks = [0]
        for table in (self.dd, self.qd, self.qq):
            for (i, j) in table:
                ks.extend([i[0], j[0]])
        for i in self.lone_d:
            ks.append(i[0])
        for i in self.lone_q:
            ks.append(i[0])
        return max(ks)


def quantize(h: QuadHamiltonian, coords: str = "q") -> QuantizedOperator:
    return QuantizedOperator(
        dict(h.pp), dict(h.pq), dict(h.qq), {}, {}, Fraction(0), Fraction(0), coords
    )


def poisson_bracket(f: QuadHamiltonian, g: QuadHamiltonian) -> QuadHamiltonian:
    """{f, g} = sum_v (df/dp_v dg/dq_v - df/dq_v dg/dp_v) on quadratic forms."""

    def gradients(h: QuadHamiltonian) -> Tuple[Dict, Dict]:
        dp: Dict[Insertion, Dict[VarTag, Any]] = {}
        dq: Dict[Insertion, Dict[VarTag, Any]] = {}

        def bump(store, v, tag, c):
            row = store.setdefault(v, {})
            row[tag] = row.get(tag, Fraction(0)) + c

        for (i, j), c in h.pp.items():
            bump(dp, i, ("p",) + j, c * (2 if i == j else 1))
            if i != j:
                bump(dp, j, ("p",) + i, c)
        for (i, j), c in h.pq.items():
            bump(dp, i, ("q",) + j, c)
            bump(dq, j, ("p",) + i, c)
        for (i, j), c in h.qq.items():
            bump(dq, i, ("q",) + j, c * (2 if i == j else 1))
            if i != j:
                bump(dq, j, ("q",) + i, c)
        return dp, dq

    fp, fq = gradients(f)
    gp, gq = gradients(g)
    out = QuadHamiltonian.zero()

    def emit(t1: VarTag, t2: VarTag, c: Any) -> None:
        kind1, kind2 = t1[0], t2[0]
        i1, i2 = (t1[1], t1[2]), (t2[1], t2[2])
        if kind1 == "p" and kind2 == "p":
            out.add_pp(i1, i2, c)
        elif kind1 == "q" and kind2 == "q":
            out.add_qq(i1, i2, c)
        elif kind1 == "p":
            out.add_pq(i1, i2, c)
        else:
            out.add_pq(i2, i1, c)

    for v in set(fp) | set(fq) | set(gp) | set(gq):
        for t1, c1 in fp.get(v, {}).items():
            for t2, c2 in gq.get(v, {}).items():
                emit(t1, t2, c1 * c2)
        for t1, c1 in fq.get(v, {}).items():
            for t2, c2 in gp.get(v, {}).items():
                emit(t1, t2, -c1 * c2)
    return out


def cocycle(f: QuadHamiltonian, g: QuadHamiltonian) -> Any:
    """C(f, g): pairs p_I p_J against q_I q_J with weight 2 when I = J."""
    total = Fraction(0)
    for key, c in f.pp.items():
        other = g.qq.get(key)
        if other is not None:
            total += c * other * (2 if key[0] == key[1] else 1)
    for key, c in g.pp.items():
        other = f.qq.get(key)
        if other is not None:
            total -= c * other * (2 if key[0] == key[1] else 1)
    return total


WeylKey = Tuple[Mono, Mono, int]  # (q multiset, derivative multiset, hbar power)
WeylOp = Dict[WeylKey, Any]


def weyl_from_quantized(op: QuantizedOperator) -> WeylOp:
    out: WeylOp = {}

    def put(qm: Mono, dm: Mono, h: int, c: Any) -> None:
        if c == 0:
            return
        key = (sort_mono(qm), sort_mono(dm), h)
        cur = out.get(key)
        new = c if cur is None else cur + c
        if new == 0:
            out.pop(key, None)
        else:
            out[key] = new

    for (i, j), c in op.dd.items():
        put((), (i, j), 1, c)
    for (i, j), c in op.qd.items():
        put((j,), (i,), 0, c)
    for (i, j), c in op.qq.items():
        put((i, j), (), -1, c)
    for i, c in op.lone_d.items():
        put((), (i,), 0, c)
    for i, c in op.lone_q.items():
        put((i,), (), -1, c)
    if op.scalar != 0:
        put((), (), 0, op.scalar)
    if op.scalar_hinv != 0:
        put((), (), -1, op.scalar_hinv)
    return out


def _reorder(dmono: Mono, qmono: Mono) -> Dict[Tuple[Mono, Mono], Any]:
    """Normal ordering of (prod of derivatives)(prod of q's): d's to the right."""
    acc: Dict[Tuple[Mono, Mono], Any] = {(qmono, ()): 1}
    for d in dmono:
        nxt: Dict[Tuple[Mono, Mono], Any] = {}
        for (qm, dm), c in acc.items():
            key1 = (qm, sort_mono(dm + (d,)))
            nxt[key1] = nxt.get(key1, 0) + c
            cnt = qm.count(d)
            if cnt:
                key2 = (mono_remove(qm, d), dm)
                nxt[key2] = nxt.get(key2, 0) + c * cnt
        acc = nxt
    return acc


def weyl_mul(a: WeylOp, b: WeylOp) -> WeylOp:
    out: WeylOp = {}
    for (q1, d1, h1), c1 in a.items():
        for (q2, d2, h2), c2 in b.items():
            for (qm, dm), cc in _reorder(d1, q2).items():
                key = (sort_mono(q1 + qm), sort_mono(dm + d2), h1 + h2)
                cur = out.get(key)
                val = c1 * c2 * cc
                new = val if cur is None else cur + val
                if new == 0:
                    out.pop(key, None)
                else:
                    out[key] = new
    return out


def weyl_sub(a: WeylOp, b: WeylOp) -> WeylOp:
    out = dict(a)
    for key, c in b.items():
        cur = out.get(key)
        new = -c if cur is None else cur - c
        if new == 0:
            out.pop(key, None)
        else:
            out[key] = new
    return out


def weyl_commutator(a: WeylOp, b: WeylOp) -> WeylOp:
    return weyl_sub(weyl_mul(a, b), weyl_mul(b, a))


def weyl_restrict(a: WeylOp, k_max: int) -> WeylOp:
    return {
        (qm, dm, h): c
        for (qm, dm, h), c in a.items()
        if all(k <= k_max for k, _ in qm) and all(k <= k_max for k, _ in dm)
    }


def dilaton_convert(op: QuantizedOperator, vec: Sequence[Any], direction: str) -> QuantizedOperator:
    """Rewrite between q-coordinates and t-coordinates, q_1 = t_1 - vec.

    direction 'to_t' takes a q-coordinate operator to its t-coordinate form;
    'to_q' inverts that.  Only level-1 slots shift, so the change touches the
    qd and qq tables and produces lone and scalar terms.
    """
    if direction not in ("to_t", "to_q"):
        raise QfrobError("direction must be 'to_t' or 'to_q'")
    if direction == "to_t" and op.coords != "q":
        raise QfrobError("operator is not in q-coordinates")
    if direction == "to_q" and op.coords != "t":
        raise QfrobError("operator is not in t-coordinates")
    sign = -1 if direction == "to_t" else 1
    out = QuantizedOperator(
        dict(op.dd), dict(op.qd), dict(op.qq), dict(op.lone_d), dict(op.lone_q),
        op.scalar, op.scalar_hinv, "t" if direction == "to_t" else "q",
    )

    def vec_at(i: Insertion) -> Any:
        return vec[i[1]] if i[0] == 1 else 0

    def bump(table: Dict, key, c) -> None:
        cur = table.get(key)
        new = c if cur is None else cur + c
        if new == 0:
            table.pop(key, None)
        else:
            table[key] = new

    for (i, j), c in op.qd.items():
        v = vec_at(j)
        if v != 0:
            bump(out.lone_d, i, sign * c * v)
    for (i, j), c in op.qq.items():
        vi, vj = vec_at(i), vec_at(j)
        if vj != 0:
            bump(out.lone_q, i, sign * c * vj)
        if vi != 0:
            bump(out.lone_q, j, sign * c * vi)
        if vi != 0 and vj != 0:
            out.scalar_hinv = out.scalar_hinv + c * vi * vj
    return out


def _within(caps: Caps, g: int, mono: Mono) -> bool:
    return caps.admits(g, mono)


def _partial_table(f: FockElement, i: Insertion) -> Dict[Tuple[int, Mono], Any]:
    """Taylor table of dF/dt_i."""
    out: Dict[Tuple[int, Mono], Any] = {}
    for (g, mono), c in f.table.items():
        cnt = mono_counts(mono).get(i, 0)
        if not cnt:
            continue
        out[(g, mono_remove(mono, i))] = c * cnt
    return out


def _submono_splits(mono: Mono):
    """All splittings of a multiset into an ordered pair of sub-multisets."""
    counts = mono_counts(mono)
    items = sorted(counts)
    ranges = [range(counts[v] + 1) for v in items]

    def rec(idx: int, left: List[Insertion], right: List[Insertion]):
        if idx == len(items):
            yield tuple(left), tuple(right)
            return
        v = items[idx]
        n = counts[v]
        for take in range(n + 1):
            yield from rec(idx + 1, left + [v] * take, right + [v] * (n - take))

    yield from rec(0, [], [])


def apply_quantized(
    op: QuantizedOperator,
    f: FockElement,
    mode: str = "log",
    out_keys: Optional[Iterable[Tuple[int, Mono]]] = None,
):
    """Apply a quantized operator.

    mode 'log': f is a log table; returns the table of e^{-F} (Op e^{F}),
    computed at out_keys (which must be fully inside the caps after every
    lookup; otherwise CapExceededError identifies the first bad key).

    mode 'vector': f is a FockVector; returns Op applied to it directly.
    """
    if mode == "vector":
        return _apply_vector(op, f)
    if mode != "log":
        raise QfrobError(f"unknown mode {mode!r}")
    if op.coords != f.coords:
        raise QfrobError("operator and table are in different coordinate systems")
    caps = f.caps
    if out_keys is None:
        out_keys = [
            (g, mono) for (g, mono) in f.table if len(mono) + 2 <= caps.m_max
        ]

    partials: Dict[Insertion, Dict[Tuple[int, Mono], Any]] = {}

    def partial(i: Insertion) -> Dict[Tuple[int, Mono], Any]:
        got = partials.get(i)
        if got is None:
            got = _partial_table(f, i)
            partials[i] = got
        return got

    def lookup(g: int, mono: Mono, why: str) -> Any:
        if g < 0:
            return 0
        if not _within(caps, g, mono):
            raise CapExceededError(f"residual needs {g, mono} beyond caps ({why})")
        return f.table.get((g, mono), 0)

    out = FockElement(f.dim, caps, None, f.coords)
    for g, mono in out_keys:
        mono = sort_mono(mono)
        acc: Any = 0
        for (i, j), c in op.dd.items():
            # hbar (dd F + dF dF) at hbar^{g-1}
            m1 = mono_add(mono, i)
            m2 = mono_add(m1, j)
            cnt_i = mono_counts(m1)[i]
            cnt_j = mono_counts(m2)[j]
            acc = acc + c * cnt_i * cnt_j * lookup(g - 1, m2, "second derivative")
            di, dj = partial(i), partial(j)
            for left, right in _submono_splits(mono):
                for g1 in range(0, g + 1):
                    v1 = di.get((g1, left))
                    if v1 is None or v1 == 0:
                        continue
                    v2 = dj.get((g - g1, right))
                    if v2 is None or v2 == 0:
                        continue
                    acc = acc + c * v1 * v2
        for (i, j), c in op.qd.items():
            cnt = mono_counts(mono).get(j, 0)
            if cnt:
                base = mono_remove(mono, j)
                m1 = mono_add(base, i)
                acc = acc + c * mono_counts(m1)[i] * lookup(g, m1, "string-type term")
        for (i, j), c in op.qq.items():
            if g == 0 and mono == sort_mono((i, j)):
                acc = acc + c
        for i, c in op.lone_d.items():
            m1 = mono_add(mono, i)
            acc = acc + c * mono_counts(m1)[i] * lookup(g, m1, "lone derivative")
        for i, c in op.lone_q.items():
            if g == 0 and mono == (i,):
                acc = acc + c
        if op.scalar != 0 and g == 1 and not mono:
            acc = acc + op.scalar
        if op.scalar_hinv != 0 and g == 0 and not mono:
            acc = acc + op.scalar_hinv
        if acc != 0:
            out.add(g, mono, acc)
    return out


def _apply_vector(op: QuantizedOperator, v: FockVector) -> FockVector:
    out = FockVector(v.dim, v.caps, None, v.coords)
    for (h, mono), c in v.table.items():
        counts = mono_counts(mono)
        for (i, j), w in op.dd.items():
            ci = counts.get(i, 0)
            if not ci:
                continue
            rest = mono_remove(mono, i)
            cj = mono_counts(rest).get(j, 0)
            if not cj:
                continue
            out.add(h + 1, mono_remove(rest, j), w * c * ci * cj)
        for (i, j), w in op.qd.items():
            ci = counts.get(i, 0)
            if not ci:
                continue
            out.add(h, mono_add(mono_remove(mono, i), j), w * c * ci)
        for (i, j), w in op.qq.items():
            out.add(h - 1, mono_add(mono_add(mono, i), j), w * c)
        for i, w in op.lone_d.items():
            ci = counts.get(i, 0)
            if ci:
                out.add(h, mono_remove(mono, i), w * c * ci)
        for i, w in op.lone_q.items():
            out.add(h - 1, mono_add(mono, i), w * c)
        if op.scalar != 0:
            out.add(h, mono, op.scalar * c)
        if op.scalar_hinv != 0:
            out.add(h - 1, mono, op.scalar_hinv * c)
    return out


def lower_w_tables(s: MatrixZSeries, order: int) -> Dict[Tuple[int, int], Matrix]:
    """W_{kl} with sum W_{kl} w^{-k} z^{-l} = (S*(1/w) S(1/z) - 1)/(1/w + 1/z).

    s stores S(z) = sum_k S_k z^{-k}; the divisibility is the symplectic
    condition, and its failure raises NonSymplecticError.
    """
    field = s.field
    adj = s.adjoint()
    p: Dict[Tuple[int, int], Matrix] = {}
    for a in range(0, order + 1):
        for b in range(0, order + 1 - a):
            acc = mat_zero(s.dim, field)
            ma = adj.coeffs.get(-a)
            mb = s.coeffs.get(-b)
            if ma is not None and mb is not None:
                acc = mat_mul(ma, mb, field)
            if a == 0 and b == 0:
                acc = mat_sub(acc, mat_identity(s.dim, field), field)
            p[(a, b)] = acc
    return divide_by_sum(p, order, s.dim, field)


def upper_v_tables(r: MatrixZSeries, order: int) -> Dict[Tuple[int, int], Matrix]:
    """V_{kl} with sum (-1)^{k+l} V_{kl} w^k z^l = (R*(w) R(z) - 1)/(w + z)."""
    field = r.field
    adj = r.adjoint()
    p: Dict[Tuple[int, int], Matrix] = {}
    for a in range(0, order + 1):
        for b in range(0, order + 1 - a):
            ma = adj.coeffs.get(a)
            mb = r.coeffs.get(b)
            acc = mat_zero(r.dim, field)
            if ma is not None and mb is not None:
                acc = mat_mul(ma, mb, field)
            if a == 0 and b == 0:
                acc = mat_sub(acc, mat_identity(r.dim, field), field)
            p[(a, b)] = acc
    d = divide_by_sum(p, order, r.dim, field)
    out: Dict[Tuple[int, int], Matrix] = {}
    for (k, l), m in d.items():
        if (k + l) % 2 != 0:
            m = mat_scale(field.convert(-1), m, field)
        out[(k, l)] = m
    return out


def act_lower(
    s: MatrixZSeries,
    f: FockElement,
    vec: Sequence[Any],
    center: Optional[Sequence[Any]] = None,
) -> FockElement:
    """Lower-triangular action: e^{W(q,q)/2 hbar} G([S q]_+).

    f is the log table of G in t-coordinates with dilaton vector vec; the
    output is expanded around the flat center (a vector at level 0, default
    zero).  The quadratic W part populates the unstable genus-0 slots.
    """
    field = s.field
    n = s.dim
    order = -s.lo
    caps = f.caps
    if center is None:
        center = [field.zero] * n
    center = [field.convert(c) for c in center]
    vec = [field.convert(c) for c in vec]

    w = lower_w_tables(s, order)

    # Argument substitution t_k -> sum_j S_j t_{k+j} + const_k.
    s1 = s.coeffs.get(-1) or mat_zero(n, field)
    s1_vec = mat_vec(s1, vec, field)
    const0 = [field.sub(center[a], s1_vec[a]) for a in range(n)]
    shifts: Dict[Insertion, Any] = {}
    for a in range(n):
        if not field.is_zero(const0[a]):
            shifts[(0, a)] = const0[a]
    shifted = shift_absorb(f, shifts) if shifts else f

    sub: Dict[Insertion, Tuple[Dict[Insertion, Any], Any]] = {}
    for k in range(0, caps.k_max + 1):
        for a in range(n):
            lin: Dict[Insertion, Any] = {}
            for j in range(0, order + 1):
                mat = s.coeffs.get(-j)
                if mat is None:
                    continue
                for b in range(n):
                    c = mat[a][b]
                    if not field.is_zero(c):
                        key = (k + j, b)
                        lin[key] = field.add(lin.get(key, field.zero), c)
            sub[(k, a)] = (lin, 0)
    out = substitute_linear(shifted, sub, truncate=True)

    # W(q, q)/2 hbar with q_k = t_k + center δ_{k0} - vec δ_{k1}.
    qvals: Dict[int, List[Tuple[Dict[Insertion, Any], Any]]] = {}
    for k in (0, 1):
        qvals[k] = []
        for a in range(n):
            lin = {(k, a): field.one}
            const = center[a] if k == 0 else field.neg(vec[a])
            qvals[k].append((lin, const))

    def q_affine(k: int, a: int) -> Tuple[Dict[Insertion, Any], Any]:
        if k in qvals:
            return qvals[k][a]
        return ({(k, a): field.one}, field.zero)

    half = field.inv(field.convert(2))
    for (k, l), mat in w.items():
        # term (W_{kl} q_k, q_l) = q_k^T W^T G q_l
        m = mat_mul(mat_transpose(mat), s.gram, field)
        for a in range(n):
            for b in range(n):
                c = m[a][b]
                if field.is_zero(c):
                    continue
                coeff = field.mul(half, c)
                lin1, c1 = q_affine(k, a)
                lin2, c2 = q_affine(l, b)
                # expand (lin1 + c1)(lin2 + c2) into the genus-0 slots
                for v1, a1 in lin1.items():
                    for v2, a2 in lin2.items():
                        if v1[0] <= caps.k_max and v2[0] <= caps.k_max:
                            out.add(0, sort_mono((v1, v2)), coeff * a1 * a2)
                if c2 != 0:
                    for v1, a1 in lin1.items():
                        if v1[0] <= caps.k_max:
                            out.add(0, (v1,), coeff * a1 * c2)
                if c1 != 0:
                    for v2, a2 in lin2.items():
                        if v2[0] <= caps.k_max:
                            out.add(0, (v2,), coeff * a2 * c1)
                if c1 != 0 and c2 != 0:
                    out.add(0, (), coeff * c1 * c2)
    return out


def act_upper(
    r: MatrixZSeries,
    f: FockElement,
    vec: Sequence[Any],
    heat_steps: Optional[int] = None,
    reach_m: Optional[Sequence[int]] = None,
    reach_k: Optional[int] = None,
    skip_shifts: bool = False,
) -> FockElement:
    """Upper-triangular action: [e^{hbar V(d,d)/2} G](R^{-1} q).

    f is the log table of G in t-coordinates with dilaton vector vec, over a
    frame whose pairing is the identity (the only case used).  The heat flow
    conserves 2g - 2 + m per step and adds it under merges, so enforcing the
    table caps on every produced key keeps the state finite without losing
    any contribution to keys inside the caps whose full dependency tree fits
    there.  The argument substitution rewrites the output in its own t-chart
    with the same dilaton vector, shifting slots of level >= 2 by constants;
    skip_shifts omits that absorption for callers who folded the shifts into
    the input stream already.

    reach_m (one entry per genus) declares which (g, m) slots the caller
    will read; state keys that cannot flow into any of them are dropped.
    The flow lowers m by at most 2 per unit genus raised, and an insertion
    of level above reach_k can only leave via the two slots a genus raise
    consumes or the one slot a merge consumes, which bounds the useful
    count of such insertions per key.
    """
    field = r.field
    n = r.dim
    order = r.hi
    caps = f.caps
    ident = mat_identity(n, field)
    if any(
        not field.close(x, y) for rx, ry in zip(r.gram, ident) for x, y in zip(rx, ry)
    ):
        raise QfrobError("act_upper requires an identity-pairing frame")
    vec = [field.convert(c) for c in vec]

    g_top = caps.g_max
    reach_vec: Optional[Tuple[int, ...]] = None
    d_allow: Optional[List[int]] = None
    if reach_m is not None:
        reach_vec = tuple(int(x) for x in reach_m)
        if len(reach_vec) != g_top + 1:
            raise QfrobError("reach_m needs one entry per genus up to the cap")
        # Largest deficit 3g' - 3 + m' - sum k' any still-reachable read key
        # can carry; every flow step raises the deficit by at least 1 + k + l.
        d_allow = []
        for g in range(g_top + 1):
            d_allow.append(max(3 * g2 - 3 + reach_vec[g2] for g2 in range(g, g_top + 1)))

    def attrs_ok(g: int, m_len: int, sk: int, jh: int) -> bool:
        if g > g_top or m_len > caps.m_max:
            return False
        if reach_vec is None:
            return True
        ok = False
        for g2 in range(g, g_top + 1):
            if m_len - 2 * (g2 - g) <= reach_vec[g2]:
                ok = True
                break
        if not ok:
            return False
        if 3 * g - 3 + m_len - sk > d_allow[g]:
            return False
        if jh:
            allow = -1
            for g2 in range(g, g_top + 1):
                up = g2 - g
                cand = 2 * up + max(0, reach_vec[g2] - (m_len - 2 * up))
                if cand > allow:
                    allow = cand
            if jh > allow:
                return False
        return True

    def key_attrs(mono: Mono) -> Tuple[int, int, int]:
        sk = 0
        jh = 0
        for k, _ in mono:
            sk += k
            if reach_k is not None and k > reach_k:
                jh += 1
        return len(mono), sk, jh

    def reachable(g: int, mono: Mono) -> bool:
        m_len, sk, jh = key_attrs(mono)
        return attrs_ok(g, m_len, sk, jh)

    vtab = upper_v_tables(r, order)
    vterms: List[Tuple[Insertion, Insertion, Any]] = []
    for (k, l), mat in vtab.items():
        if d_allow is not None and 1 + k + l > d_allow[0]:
            continue
        for a in range(n):
            for b in range(n):
                c = mat[a][b]
                if not field.is_zero(c):
                    vterms.append(((k, a), (l, b), c))

    def partial(table: Dict, i: Insertion) -> Dict[Tuple[int, Mono], Any]:
        out: Dict[Tuple[int, Mono], Any] = {}
        for (g, mono), c in table.items():
            cnt = mono_counts(mono).get(i, 0)
            if cnt:
                out[(g, mono_remove(mono, i))] = c * cnt
        return out

    # Taylor orders of the flow dF/ds = (hbar/2) V(d,d) applied to the log:
    # F_s = sum_m phi[m] s^m, evaluated at s = 1.  Derivative tables are
    # bucketed by the additive key attributes (genus, count, level sum,
    # high-level count) so that pairs whose merge fails the caps or the
    # reachability filters are skipped a whole bucket at a time.
    phi0 = {
        key: v for key, v in f.table.items() if reachable(key[0], key[1])
    }
    phi: List[Dict[Tuple[int, Mono], Any]] = [phi0]
    max_steps = heat_steps if heat_steps is not None else (3 * caps.g_max + caps.m_max + 4)
    Bucket = Dict[Tuple[int, int, int, int], List[Tuple[Mono, Any]]]
    for m in range(0, max_steps):
        nxt: Dict[Tuple[int, Mono], Any] = {}

        def bump(g, mono, c):
            key = (g, mono)
            cur = nxt.get(key)
            new = c if cur is None else cur + c
            if new == 0:
                nxt.pop(key, None)
            else:
                nxt[key] = new

        dcache: List[Dict[Insertion, Bucket]] = [dict() for _ in range(m + 1)]

        def dtab(s_idx: int, i: Insertion) -> Bucket:
            got = dcache[s_idx].get(i)
            if got is None:
                got = {}
                for (g, mono), c in partial(phi[s_idx], i).items():
                    m_len, sk, jh = key_attrs(mono)
                    got.setdefault((g, m_len, sk, jh), []).append((mono, c))
                dcache[s_idx][i] = got
            return got

        for i, j, c in vterms:
            for (g, mono), val in phi[m].items():
                if g + 1 > g_top:
                    continue
                cnt_i = mono_counts(mono).get(i, 0)
                if not cnt_i:
                    continue
                rest = mono_remove(mono, i)
                cnt_j = mono_counts(rest).get(j, 0)
                if not cnt_j:
                    continue
                out = mono_remove(rest, j)
                if reachable(g + 1, out):
                    bump(g + 1, out, c * val * cnt_i * cnt_j)
            for s1 in range(0, m + 1):
                p1 = dtab(s1, i)
                if not p1:
                    continue
                p2 = dtab(m - s1, j)
                if not p2:
                    continue
                for (g1, l1, sk1, jh1), lst1 in p1.items():
                    for (g2, l2, sk2, jh2), lst2 in p2.items():
                        if not attrs_ok(g1 + g2, l1 + l2, sk1 + sk2, jh1 + jh2):
                            continue
                        g12 = g1 + g2
                        for k1, v1 in lst1:
                            cv1 = c * v1
                            for k2, v2 in lst2:
                                bump(g12, sort_mono(k1 + k2), cv1 * v2)
        if not nxt:
            phi.append({})
            break
        scale = field.convert(Fraction(1, 2 * (m + 1)))
        phi.append({key: val for key, val in ((kk, vv * scale) for kk, vv in nxt.items()) if val != 0})
        if not phi[-1]:
            break

    flowed = FockElement(f.dim, caps, None, f.coords)
    for stage in phi:
        for (g, mono), c in stage.items():
            flowed.add(g, mono, c)

    # Argument substitution t_k -> sum_j Rinv_j t_{k-j} + shift_k with
    # shift = z (1 - R^{-1}(z)) vec supported on levels >= 2.
    rinv = series_inverse(r)
    shifts: Dict[Insertion, Any] = {}
    if not skip_shifts:
        for j in range(1, order + 1):
            mat = rinv.coeffs.get(j)
            if mat is None:
                continue
            sh = mat_vec(mat, vec, field)
            for a in range(n):
                if not field.is_zero(sh[a]):
                    shifts[(j + 1, a)] = field.neg(sh[a])
    shifted = shift_absorb(flowed, shifts) if shifts else flowed

    sub: Dict[Insertion, Tuple[Dict[Insertion, Any], Any]] = {}
    for k in range(0, caps.k_max + 1):
        for a in range(n):
            lin: Dict[Insertion, Any] = {}
            for j in range(0, min(order, k) + 1):
                mat = rinv.coeffs.get(j)
                if mat is None:
                    continue
                for b in range(n):
                    c = mat[a][b]
                    if not field.is_zero(c):
                        key = (k - j, b)
                        lin[key] = field.add(lin.get(key, field.zero), c)
            sub[(k, a)] = (lin, 0)
    return substitute_linear(shifted, sub, truncate=True)
