"""Virasoro operators: symbols, quantization, closure and annihilation.

The raw symbols are L_m = z^{-1/2} (z d/dz z - mu z + rho)^{m+1} z^{-1/2},
banded differential operators in z acting on vector Laurent polynomials.
For the one-dimensional model with mu = 0, rho = 0 the action on z^k is
multiplication by prod_{j=0}^{m} (k + 1/2 + j) and a shift by z^m.

Quantized operators close to [L^_m, L^_n] = (m - n) L^_{m+n} once the
index-0 operator is shifted by its central constant; the commutators here
are computed exactly in the Weyl algebra, including the constants.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from typing import Any, Dict, Iterable, Optional, Sequence, Tuple

from .coefficients import RationalField
from .errors import QfrobError
from .fock import FockElement, Mono
from .quantize import (
    DarbouxFrame,
    QuantizedOperator,
    WeylOp,
    apply_quantized,
    dilaton_convert,
    hamiltonian_of,
    quantize,
    weyl_commutator,
    weyl_from_quantized,
    weyl_restrict,
    weyl_sub,
)
from .series import Matrix, mat_identity, mat_inv, mat_mul, mat_transpose

_RAT = RationalField()


@dataclass(frozen=True)
class VirasoroIndexData:
    """Conformal data entering the Virasoro symbols.

    mu is the diagonal of the grading operator (anti-symmetric for the
    pairing: mu* = -mu) and rho the classical first-Chern multiplication
    matrix (symmetric: rho* = rho, and nilpotent).
    """

    dim: int
    gram: Matrix
    mu: Tuple[Fraction, ...]
    rho: Matrix

    def __post_init__(self) -> None:
        g = self.gram
        ginv = mat_inv(g, _RAT)
        mu_mat = tuple(
            tuple(self.mu[i] if i == j else Fraction(0) for j in range(self.dim))
            for i in range(self.dim)
        )
        mu_adj = mat_mul(ginv, mat_mul(mat_transpose(mu_mat), g, _RAT), _RAT)
        for i in range(self.dim):
            for j in range(self.dim):
                if mu_adj[i][j] != -mu_mat[i][j]:
                    raise QfrobError("mu is not anti-symmetric for the pairing")
        rho_adj = mat_mul(ginv, mat_mul(mat_transpose(self.rho), g, _RAT), _RAT)
        if rho_adj != tuple(tuple(row) for row in self.rho):
            raise QfrobError("rho is not symmetric for the pairing")

    def central_constant(self) -> Fraction:
        """The index-0 shift: tr(mu mu)/4 over the diagonal entries."""
        return sum((x * x for x in self.mu), Fraction(0)) / 4


@dataclass(frozen=True)
class VirasoroOperator:
    """A quantized Virasoro operator together with its additive constant."""

    index: int
    op: QuantizedOperator
    constant: Fraction

    def weyl(self) -> WeylOp:
        w = weyl_from_quantized(self.op)
        if self.constant != 0:
            key = ((), (), 0)
            w[key] = w.get(key, Fraction(0)) + self.constant
        return w


def _point_factor(k: int, m: int) -> Fraction:
    out = Fraction(1)
    for j in range(m + 1):
        out *= k + Fraction(1, 2) + j
    return out


@lru_cache(maxsize=None)
def point_virasoro(m: int, k_max: int) -> VirasoroOperator:
    """Quantized L_m for the one-dimensional model, complete for levels <= k_max.

    L^_{-1} = q_0^2/2 hbar + sum q_{m+1} d_m, constant 0;
    L^_0 = sum (m + 1/2) q_m d_m, constant 1/16; and so on.
    """
    if m < -1:
        raise QfrobError("Virasoro indices start at -1")
    frame = DarbouxFrame(1, ((Fraction(1),),), k_max)

    def apply_basis(k: int):
        return {k + m: ((_point_factor(k, m),),)}

    h = hamiltonian_of(apply_basis, frame, abs(m) + 1)
    constant = Fraction(1, 16) if m == 0 else Fraction(0)
    return VirasoroOperator(m, quantize(h), constant)


def _conformal_apply_basis(data: VirasoroIndexData, m: int):
    n = data.dim
    mu_mat = tuple(
        tuple(data.mu[i] if i == j else Fraction(0) for j in range(n)) for i in range(n)
    )
    rho = tuple(tuple(Fraction(x) for x in row) for row in data.rho)
    ident = mat_identity(n, _RAT)

    def apply_basis(k: int) -> Dict[int, Matrix]:
        # States: exponent of z (a half-integer) -> matrix acting on the input vector.
        states: Dict[Fraction, Matrix] = {Fraction(k) - Fraction(1, 2): ident}
        for _ in range(m + 1):
            nxt: Dict[Fraction, Matrix] = {}

            def bump(h: Fraction, mat: Matrix) -> None:
                cur = nxt.get(h)
                nxt[h] = mat if cur is None else tuple(
                    tuple(a + b for a, b in zip(ra, rb)) for ra, rb in zip(cur, mat)
                )

            for h, mat in states.items():
                scaled = tuple(tuple((h + 1) * x for x in row) for row in mat)
                mu_part = mat_mul(mu_mat, mat, _RAT)
                bump(h + 1, tuple(
                    tuple(a - b for a, b in zip(ra, rb)) for ra, rb in zip(scaled, mu_part)
                ))
                bump(h, mat_mul(rho, mat, _RAT))
            states = nxt
        out: Dict[int, Matrix] = {}
        for h, mat in states.items():
            power = h - Fraction(1, 2)
            if power.denominator != 1:
                raise QfrobError("conformal symbol produced a non-integer power")
            out[int(power)] = mat
        return out

    return apply_basis


@lru_cache(maxsize=None)
def conformal_virasoro(data: VirasoroIndexData, m: int, k_max: int) -> VirasoroOperator:
    """Quantized conformal Virasoro operator, complete for levels <= k_max."""
    if m < -1:
        raise QfrobError("Virasoro indices start at -1")
    frame = DarbouxFrame(data.dim, data.gram, k_max)
    h = hamiltonian_of(_conformal_apply_basis(data, m), frame, abs(m) + 2)
    constant = data.central_constant() if m == 0 else Fraction(0)
    return VirasoroOperator(m, quantize(h), constant)


def annihilation_residual(
    l: VirasoroOperator,
    f: FockElement,
    vec: Sequence[Any],
    out_keys: Optional[Iterable[Tuple[int, Mono]]] = None,
) -> FockElement:
    """Residual table of (L^ + constant) acting on a potential's log table.

    vec is the dilaton vector of the table's t-chart.  Residual entries are
    computed at out_keys; each must be exactly zero (or below tolerance) for
    the potential to satisfy the constraint there.
    """
    op = dilaton_convert(l.op, vec, "to_t")
    if l.constant != 0:
        op = QuantizedOperator(
            op.dd, op.qd, op.qq, op.lone_d, op.lone_q,
            op.scalar + l.constant, op.scalar_hinv, op.coords,
        )
    return apply_quantized(op, f, "log", out_keys)


def bracket_defect(
    m: int,
    n: int,
    k_max: int,
    data: Optional[VirasoroIndexData] = None,
    headroom: Optional[int] = None,
) -> WeylOp:
    """[L^_m, L^_n] - (m - n) L^_{m+n}, constants included, levels <= k_max.

    Operators are built with index headroom so that every retained entry of
    the commutator is complete; an empty result certifies closure.
    """
    if headroom is None:
        headroom = abs(m) + abs(n) + 2
    k_int = k_max + headroom

    def build(idx: int) -> VirasoroOperator:
        if data is None:
            return point_virasoro(idx, k_int)
        return conformal_virasoro(data, idx, k_int)

    la, lb, lab = build(m), build(n), build(m + n)
    comm = weyl_commutator(la.weyl(), lb.weyl())
    expected: WeylOp = {}
    for key, c in lab.weyl().items():
        val = (m - n) * c
        if val != 0:
            expected[key] = val
    defect = weyl_sub(comm, expected)
    return weyl_restrict(defect, k_max)
