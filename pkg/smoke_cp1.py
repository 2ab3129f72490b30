import time

import mpmath
from fractions import Fraction

from qfrob.fock import Caps
from qfrob.frobenius import (
    assemble_descendent,
    canonical_frame,
    cpn_small_model,
    genus0_reconstruct,
    genus1,
    genus1_descendent,
)

t_all = time.time()
model = cpn_small_model(1)
frame = canonical_frame(model, 0, 60)
f = frame.field
tol = mpmath.mpf(10) ** (-45)

caps = Caps(1, 4, 3)
t0 = time.time()
desc = assemble_descendent(model, 0, caps, 60)
print(f"assemble(1,4,3): {time.time() - t0:.1f}s, {len(desc.table)} keys")

checks = [
    ((0, ((0, 1), (0, 1), (0, 1))), Fraction(1, 6)),
    ((0, ((0, 0), (0, 1), (0, 1))), 0),
    ((0, ((0, 0), (0, 0), (0, 1))), Fraction(1, 2)),
    ((1, ((1, 0),)), Fraction(1, 12)),
    ((1, ((0, 1),)), Fraction(-1, 24)),
    ((1, ((0, 0),)), 0),
    # degree-2 two-pointed: <P P>_{0,d}: <tau_0(P)tau_1(P)>_{0,1} = 1 -> key?
]
ok = True
for key, want in checks:
    got = desc.table.get(key, f.zero)
    dev = abs(got - f.convert(want))
    if dev > tol:
        ok = False
        print("MISMATCH", key, "want", want, "got", mpmath.nstr(got, 10))
g1v = genus1(model, 0, 60)
got = desc.table.get((1, ()), f.zero)
if abs(got - g1v) > tol:
    ok = False
    print("MISMATCH (1,()) vs genus1(0)")
print("value checks:", "ok" if ok else "FAILED")

# criterion-6 genus-0 slice vs independent reconstruction
t0 = time.time()
g0 = genus0_reconstruct(model, 0, 4, 3, 60)
print(f"genus0_reconstruct: {time.time() - t0:.1f}s, {len(g0.table)} keys")
worst = mpmath.mpf(0)
n_cmp = 0
for (g, mono), v in g0.table.items():
    if g != 0:
        continue
    d = abs(desc.table.get((g, mono), f.zero) - v)
    worst = max(worst, d)
    n_cmp += 1
for (g, mono), v in desc.table.items():
    if g == 0 and (g, mono) not in g0.table:
        worst = max(worst, abs(v))
print(f"genus-0 slice: {n_cmp} keys, worst dev {mpmath.nstr(worst, 3)}",
      "ok" if worst < tol else "FAILED")

# criterion-6 genus-1 slice vs independent reconstruction
t0 = time.time()
g1t = genus1_descendent(model, 0, 4, 3, 60)
print(f"genus1_descendent: {time.time() - t0:.1f}s, {len(g1t.table)} keys")
worst1 = mpmath.mpf(0)
n_cmp = 0
for (g, mono), v in g1t.table.items():
    if g != 1:
        continue
    d = abs(desc.table.get((g, mono), f.zero) - v)
    worst1 = max(worst1, d)
    n_cmp += 1
for (g, mono), v in desc.table.items():
    if g == 1 and (g, mono) not in g1t.table:
        worst1 = max(worst1, abs(v))
print(f"genus-1 slice: {n_cmp} keys, worst dev {mpmath.nstr(worst1, 3)}",
      "ok" if worst1 < tol else "FAILED")
print(f"total {time.time() - t_all:.1f}s")
