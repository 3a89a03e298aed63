"""Periodic cell problems, correctors and the homogenized matrix."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConvergenceError, DimensionError, GeometryError, SingularSystemError
from .fem import DofMap, assemble_mass, element_stiffness, _element_coefficient, _scatter
from .geometry import CellMesh, build_cell_mesh

RESIDUAL_TOL = 1e-9


@dataclass(frozen=True)
class CellSolution:
    chi: np.ndarray          # (2, n_nodes) nodal correctors
    B: np.ndarray            # (2, 2)
    theta: float
    residuals: tuple
    h: float
    mesh: CellMesh

    @property
    def ellipticity(self):
        return ellipticity_constant(self.B)

    def to_text(self):
        lines = [f"theta {self.theta:.17g}",
                 "B " + " ".join(f"{v:.17g}" for v in self.B.ravel()),
                 "residuals " + " ".join(f"{r:.17g}" for r in self.residuals),
                 f"h {self.h:.17g}",
                 f"ellipticity {self.ellipticity:.17g}"]
        return "\n".join(lines) + "\n"


def _coefficient_of(mesh, coefficient):
    return mesh.cell.coefficient if coefficient is None else coefficient


def _transposed(coefficient):
    if hasattr(coefficient, "transposed"):
        return coefficient.transposed()
    return lambda y: np.swapaxes(np.asarray(coefficient(y)), 1, 2)


class _CellSystem:
    """Periodic stiffness for the cell problem plus the mean-zero constraint."""

    def __init__(self, mesh, coefficient):
        self.mesh = mesh
        self.dofmap = DofMap.periodic(mesh)
        coef_t = _transposed(coefficient)
        # bilinear form sum_{k,l} int a_kl d_k u d_l v  ==  int (a^T grad u) . grad v
        self.local = element_stiffness(mesh, coef_t)
        self.K = _scatter(mesh, np.arange(mesh.n_triangles), self.local, self.dofmap).tocsr()
        M = assemble_mass(mesh, self.dofmap).matrix
        self.c = np.asarray(M.sum(axis=1)).ravel()  # c . u = int u
        self.A_el = _element_coefficient(mesh, coefficient, np.arange(mesh.n_triangles))
        n = self.K.shape[0]
        border = sp.csr_matrix(self.c[None, :])
        self.bordered = sp.bmat([[self.K, border.T], [border, None]], format="csc")
        try:
            self.lu = spla.splu(self.bordered)
        except RuntimeError as exc:
            raise SingularSystemError(f"bordered cell system is singular: {exc}") from exc
        self.n = n

    def rhs(self, i):
        # int (a^T e_i) . grad(phi_v)
        g = self.mesh.gradients
        flux = self.A_el[:, i, :]  # (a^T e_i)_l = a_il
        local = self.mesh.areas[:, None] * np.einsum("tjd,td->tj", g, flux)
        out = np.zeros(self.mesh.n_nodes)
        np.add.at(out, self.mesh.triangles, local)
        mag = np.zeros(self.mesh.n_nodes)
        np.add.at(mag, self.mesh.triangles, np.abs(local))
        P = self.dofmap.prolongation
        # magnitude of the un-cancelled contributions, the scale for residuals
        self.rhs_scale = float(np.abs(P.T @ mag).max())
        return P.T @ out

    def solve(self, r, refine=3):
        b = np.concatenate([r, [0.0]])
        x = self.lu.solve(b)
        for _ in range(refine):
            d = b - self.bordered @ x
            if np.linalg.norm(d) <= 1e-15 * (np.linalg.norm(b) + 1e-300):
                break
            x = x + self.lu.solve(d)
        u, lam = x[:-1], x[-1]
        return u, lam

    def residual(self, u, r):
        """Normwise backward error of K u = r together with c.u = 0."""
        res = np.concatenate([self.K @ u - r, [self.c @ u]])
        knorm = spla.norm(self.K, np.inf)
        denom = knorm * np.linalg.norm(u, np.inf) + max(np.linalg.norm(r, np.inf), self.rhs_scale)
        if denom == 0:
            return 0.0
        return float(np.linalg.norm(res, np.inf) / denom)


def solve_corrector(cell_mesh: CellMesh, coefficient=None, i: int = 1, _system=None):
    """Corrector for direction ``i`` (1 or 2), normalized to zero mean over Y*.

    Solves, for every periodic test function v,
    ``sum_{k,l} int_{Y*} a_kl d_k(chi - y_i) d_l v = 0`` with the natural
    condition on the hole; the constant kernel is removed by a Lagrange
    multiplier on the mean.  Returns the nodal field and relative residual.
    """
    if i not in (1, 2):
        raise ValueError("direction index must be 1 or 2")
    coefficient = _coefficient_of(cell_mesh, coefficient)
    system = _system or _CellSystem(cell_mesh, coefficient)
    r = system.rhs(i - 1)
    u, lam = system.solve(r)
    res = system.residual(u, r)
    if not np.isfinite(res) or res > RESIDUAL_TOL:
        raise ConvergenceError(f"corrector {i} residual {res:.3e} exceeds {RESIDUAL_TOL:g}", residual=res)
    # the multiplier vanishes for a consistent right-hand side
    if abs(lam) > 1e-8 * (np.abs(r).max() + 1.0):
        raise SingularSystemError(f"cell system inconsistent (multiplier {lam:.3e})")
    return system.dofmap.expand(u), res


def homogenized_matrix(cell_mesh: CellMesh, coefficient=None, chi=None):
    """B and the volume fraction from correctors on ``cell_mesh``.

    ``beta_ij = (1/|Y|) [ int_{Y*} a_ij - int_{Y*} sum_k a_kj d_k chi^i ]``.
    """
    coefficient = _coefficient_of(cell_mesh, coefficient)
    chi = np.asarray(chi, dtype=float)
    if chi.shape != (2, cell_mesh.n_nodes):
        raise DimensionError(f"correctors have shape {chi.shape}, expected (2, {cell_mesh.n_nodes})")
    A = _element_coefficient(cell_mesh, coefficient, np.arange(cell_mesh.n_triangles))
    w = cell_mesh.areas
    Yarea = cell_mesh.cell.area
    first = np.einsum("t,tij->ij", w, A)
    g = cell_mesh.gradients
    grad_chi = np.einsum("tkd,itk->itd", g, chi[:, cell_mesh.triangles])  # (2, t, 2)
    # second[i, j] = int sum_k a_kj d_k chi^i
    second = np.einsum("t,tkj,itk->ij", w, A, grad_chi)
    B = (first - second) / Yarea
    theta = cell_mesh.area / Yarea
    return B, theta


def ellipticity_constant(B):
    B = np.asarray(B, dtype=float)
    return float(np.linalg.eigvalsh(0.5 * (B + B.T)).min())


def solve_cell(cell, h, coefficient=None) -> CellSolution:
    """Mesh the cell, solve both correctors, and assemble B and theta."""
    mesh = build_cell_mesh(cell, h)
    if coefficient is None:
        cell.check_coefficient()
        coefficient = cell.coefficient
    elif hasattr(coefficient, "ellipticity") and not coefficient.ellipticity() > 0:
        raise GeometryError(f"coefficient {coefficient!r} is not uniformly elliptic")
    system = _CellSystem(mesh, coefficient)
    chis, res = [], []
    for i in (1, 2):
        c, r = solve_corrector(mesh, coefficient, i, _system=system)
        chis.append(c)
        res.append(r)
    chi = np.vstack(chis)
    B, theta = homogenized_matrix(mesh, coefficient, chi)
    return CellSolution(chi, B, theta, tuple(res), float(h), mesh)


def cell_from_text(text):
    """Read the scalar part (B, theta, residuals, h) written by ``CellSolution.to_text``."""
    vals = {}
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        key, *rest = s.split()
        try:
            vals[key] = [float(v) for v in rest]
        except ValueError as exc:
            raise DimensionError(f"line {no}: bad number in {line!r}") from exc
    try:
        B = np.array(vals["B"]).reshape(2, 2)
        return CellSolution(None, B, vals["theta"][0], tuple(vals.get("residuals", ())),
                            vals.get("h", [float("nan")])[0], None)
    except (KeyError, ValueError, IndexError) as exc:
        raise DimensionError(f"incomplete cell artifact: {exc}") from exc
