"""Single-mode forcing reduces the scheme to an OU process: compare the
Monte Carlo second moment with the closed form and read off the weak order."""

from perfhom.experiments import run_ou

r = run_ou(n_paths=500, dts=(4e-3, 2e-3, 1e-3), T=0.5)
for dt in r.dts:
    m, se = r.second_moment[dt]
    print(f"dt={dt:g}  E[(u,phi1)^2] = {m:.6f} +- {se:.6f}")
print(f"continuous limit {r.exact:.6f}, scheme at finest dt {r.exact_discrete:.6f}")
print(f"weak slope {r.slope:.3f}")
