"""Effective coefficient of a disk-perforated cell and its refinement order."""

import math

from perfhom.cell import solve_cell
from perfhom.geometry import Disk, PeriodicCell

cell = PeriodicCell(hole=Disk((0.5, 0.5), 0.25))
hs = (0.08, 0.04, 0.02, 0.01)
beta = []
for h in hs:
    s = solve_cell(cell, h)
    beta.append(s.B[0, 0])
    print(f"h={h:<5g} B11={s.B[0, 0]:.8f} B22={s.B[1, 1]:.8f} B12={s.B[0, 1]:+.1e} theta={s.theta:.6f}")

for i in range(len(hs) - 2):
    order = math.log2((beta[i] - beta[i + 1]) / (beta[i + 1] - beta[i + 2]))
    print(f"observed order from h={hs[i]:g}: {order:.3f}")
print(f"exact volume fraction 1 - pi/16 = {1 - math.pi / 16:.6f}")
