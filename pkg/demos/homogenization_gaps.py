"""Micro ensembles at three eps against the homogenized macro ensemble,
all driven by the same Wiener increments.  Reduced path count; the
acceptance suite runs the same family at 200 paths."""

import sys

from perfhom.experiments import default_family, run_comparison

n = int(sys.argv[1]) if len(sys.argv) > 1 else 20
r = run_comparison(default_family(), n_paths=n, strong_every=10)
print(f"theta={r.theta:.6f}  B=diag({r.B[0, 0]:.6f}, {r.B[1, 1]:.6f})  paths={r.n_paths}")
for e in r.eps_list:
    g, se, t = r.energy_gap[e]
    s, sse = r.strong_gap[e]
    print(f"eps={e:<7g} sup energy gap {g:.3e} +- {se:.1e} (t={t:.3f})  strong L2 gap {s:.3e} +- {sse:.1e}")
    print("           pairing gaps " + " ".join(f"{x:.2e}" for x in r.pairing_gap[e][0]))
print("Ito cross-check:", {k: ("ok" if v[0] else "FAIL") for k, v in r.ito.items()})
print("est1 bound:", {k: f"{v[1]:.3f}" for k, v in r.est1.items()})
