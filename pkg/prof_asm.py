import time

from qfrob.fock import Caps, FockElement
from qfrob.frobenius import (
    _assembly_windows,
    _reach_vector,
    canonical_frame,
    cpn_small_model,
    rmatrix,
)
from qfrob.kdvtau import solve_tau_full
from qfrob.quantize import act_upper

model = cpn_small_model(1)
caps = Caps(2, 6, 6)
reach = _reach_vector(caps, (6, 6, 5))
icaps, w_int = _assembly_windows(caps)
print("icaps", icaps.g_max, icaps.m_max, icaps.k_max, "w_int", w_int)

frame = canonical_frame(model, 0, 60)
t0 = time.time()
rm = rmatrix(model, frame, icaps.k_max + 1)
print(f"rmatrix {time.time() - t0:.1f}s")

t0 = time.time()
tau = solve_tau_full(15)
print(f"tau(15) {time.time() - t0:.1f}s, {len(tau.table)} keys")

# rebuild merged exactly as assemble_ancestor does, with timing
import qfrob.frobenius as fb

t0 = time.time()
f = frame.field
from qfrob.series import series_inverse, mat_vec

rinv = series_inverse(rm.series)
scalings = frame.dilaton_scalings()
shift_vec = {}
for j in range(1, rm.series.hi + 1):
    mat = rinv.coeffs.get(j)
    if mat is None:
        continue
    sh = mat_vec(mat, scalings, f)
    vals = [f.neg(x) for x in sh]
    if any(not f.is_zero(x) for x in vals):
        shift_vec[j + 1] = vals
g_top = caps.g_max
keep_m = []
for g in range(g_top + 1):
    best = max(reach[g2] + 2 * (g2 - g) for g2 in range(g, g_top + 1))
    keep_m.append(min(best, icaps.m_max, w_int + 2 - 2 * g))
w_raw = max(w_int, max(5 * g - 5 + 2 * keep_m[g] for g in range(g_top + 1)))
print("keep_m", keep_m, "w_raw", w_raw)

from qfrob.fock import shift_absorb


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
    ta = time.time()
    absorbed = shift_absorb(block, shifts_i)
    print(f"absorb class {i}: {time.time() - ta:.1f}s, block {len(block.table)}")
    for (g, mono), c in absorbed.table.items():
        if stream_keep(g, mono):
            merged.add(g, mono, c)
print(f"stream build total {time.time() - t0:.1f}s, merged {len(merged.table)} keys")

# now the flow with instrumentation: copy of act_upper's flow loop with timing
import cProfile
import pstats

t0 = time.time()
prof = cProfile.Profile()
prof.enable()
flowed = act_upper(rm.series, merged, scalings,
                   reach_m=reach, reach_k=caps.k_max, skip_shifts=True)
prof.disable()
print(f"act_upper {time.time() - t0:.1f}s, flowed {len(flowed.table)}")
pstats.Stats(prof).sort_stats("cumulative").print_stats(18)
