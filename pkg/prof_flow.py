import time

from qfrob.fock import Caps, FockElement, mono_counts, mono_remove, sort_mono
from qfrob.frobenius import (
    _assembly_windows,
    _reach_vector,
    canonical_frame,
    cpn_small_model,
    rmatrix,
)
from qfrob.quantize import upper_v_tables

import pickle

# Rebuild the merged stream via the real assembler internals, then replay
# the flow loop with counters.
from qfrob import frobenius as fb
from qfrob.kdvtau import solve_tau_full
from qfrob.series import series_inverse, mat_vec
from qfrob.fock import shift_absorb

model = cpn_small_model(1)
caps = Caps(2, 6, 6)
reach = _reach_vector(caps, (6, 6, 5))
icaps, w_int = _assembly_windows(caps)
frame = canonical_frame(model, 0, 60)
f = frame.field
rm = rmatrix(model, frame, icaps.k_max + 1)
tau = solve_tau_full(15)
rinv = series_inverse(rm.series)
scalings = frame.dilaton_scalings()
shift_vec = {}
for j in range(1, rm.series.hi + 1):
    mat = rinv.coeffs.get(j)
    if mat is None:
        continue
    vals = [f.neg(x) for x in mat_vec(mat, scalings, f)]
    if any(not f.is_zero(x) for x in vals):
        shift_vec[j + 1] = vals
g_top = caps.g_max
keep_m = []
for g in range(g_top + 1):
    best = max(reach[g2] + 2 * (g2 - g) for g2 in range(g, g_top + 1))
    keep_m.append(min(best, icaps.m_max, w_int + 2 - 2 * g))
w_raw = max(w_int, max(5 * g - 5 + 2 * keep_m[g] for g in range(g_top + 1)))


def stream_keep(g, mono):
    if g > g_top or len(mono) > keep_m[g]:
        return False
    if 2 * g - 2 + len(mono) > w_int:
        return False
    return all(k <= icaps.k_max for k, _ in mono)


merged = FockElement(model.dim, icaps, None, "t")
raw_caps = Caps(g_top, w_raw + 2, max(w_raw + g_top - 1, 0))
for i in range(model.dim):
    shifts_i = {}
    for lvl, vals in shift_vec.items():
        if not f.is_zero(vals[i]):
            shifts_i[(lvl, i)] = vals[i]
    block = FockElement(model.dim, raw_caps, None, "t")
    for (g, mono), c in tau.table.items():
        if g > g_top:
            continue
        e = 2 * g - 2 + len(mono)
        scale = fb._f_pow(f, frame.delta_sqrt[i], e)
        block.add(g, tuple((k, i) for k, _ in mono), f.mul(f.convert(c), scale))
    for (g, mono), c in shift_absorb(block, shifts_i).table.items():
        if stream_keep(g, mono):
            merged.add(g, mono, c)

print("merged", len(merged.table))

vtab = upper_v_tables(rm.series, rm.series.hi)
vterms = []
for (k, l), mat in vtab.items():
    if 1 + k + l > 8:
        continue
    for a in range(2):
        for b in range(2):
            c = mat[a][b]
            if not f.is_zero(c):
                vterms.append(((k, a), (l, b), c))
print("vterms", len(vterms))

from fractions import Fraction

phi = [dict(merged.table)]
m_cap = icaps.m_max
dall = [max(3 * g2 - 3 + reach[g2] for g2 in range(g, g_top + 1)) for g in range(g_top + 1)]


def attrs(g, mono):
    sk = sum(k for k, _ in mono)
    return 3 * g - 3 + len(mono) - sk


def reachable(g, mono):
    m_len = len(mono)
    if not any(m_len - 2 * (g2 - g) <= reach[g2] for g2 in range(g, g_top + 1)):
        return False
    if attrs(g, mono) > dall[g]:
        return False
    return True


cand_total = kept_total = 0
for m in range(0, 17):
    t0 = time.time()
    nxt = {}
    dcache = [dict() for _ in range(m + 1)]

    def partial(table, i):
        out = {}
        for (g, mono), c in table.items():
            cnt = mono_counts(mono).get(i, 0)
            if cnt:
                out[(g, mono_remove(mono, i))] = c * cnt
        return out

    def dtab(s, i):
        got = dcache[s].get(i)
        if got is None:
            got = partial(phi[s], i)
            dcache[s][i] = got
        return got

    pairs = 0
    kept = 0
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
            key = (g + 1, mono_remove(rest, j))
            if not reachable(*key):
                continue
            v = c * val * cnt_i * cnt_j
            cur = nxt.get(key)
            nxt[key] = v if cur is None else cur + v
        for s1 in range(0, m + 1):
            p1 = dtab(s1, i)
            if not p1:
                continue
            p2 = dtab(m - s1, j)
            if not p2:
                continue
            pairs += len(p1) * len(p2)
            for (g1, k1), v1 in p1.items():
                for (g2, k2), v2 in p2.items():
                    g12 = g1 + g2
                    if g12 > g_top or len(k1) + len(k2) > m_cap:
                        continue
                    key = (g12, sort_mono(k1 + k2))
                    if not reachable(*key):
                        continue
                    kept += 1
                    v = c * v1 * v2
                    cur = nxt.get(key)
                    nxt[key] = v if cur is None else cur + v
    cand_total += pairs
    kept_total += kept
    if not nxt:
        print(f"stage {m}: empty, stop")
        break
    scale = f.convert(Fraction(1, 2 * (m + 1)))
    phi.append({k2: v * scale for k2, v in nxt.items() if v != 0})
    print(f"stage {m}: phi {len(phi[m])} -> nxt {len(phi[m + 1])}, pairs {pairs}, kept {kept}, {time.time() - t0:.1f}s")
print("totals: candidate pairs", cand_total, "kept", kept_total)
