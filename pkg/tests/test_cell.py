import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from perfhom.cell import (cell_from_text, ellipticity_constant, homogenized_matrix, solve_cell,
                          solve_corrector)
from perfhom.coefficients import Coefficient
from perfhom.errors import DimensionError, GeometryError
from perfhom.geometry import Disk, PeriodicCell, build_cell_mesh

DISK = PeriodicCell(hole=Disk((0.5, 0.5), 0.25))
THETA = 1 - math.pi / 16


def test_identity_no_hole():
    s = solve_cell(PeriodicCell(), 0.1)
    assert np.abs(s.chi).max() < 1e-12
    assert np.allclose(s.B, np.eye(2), atol=1e-12) and s.theta == pytest.approx(1.0, abs=1e-14)


def test_diag_no_hole_is_exact():
    cell = PeriodicCell(coefficient=Coefficient.diag(2, 3))
    s = solve_cell(cell, 0.02)
    assert np.abs(s.chi).max() < 1e-10
    assert np.abs(s.B - np.diag([2.0, 3.0])).max() < 1e-10
    assert abs(s.theta - 1) < 1e-12
    assert max(s.residuals) <= 1e-9


def _reflect_index(mesh, axis):
    """Node permutation for y_axis -> l - y_axis, up to periodic identification."""
    from scipy.spatial import cKDTree
    l = mesh.cell.lengths[axis]
    p = mesh.nodes.copy()
    p[:, axis] = l - p[:, axis]
    d, idx = cKDTree(mesh.nodes).query(p)
    assert d.max() < 1e-10
    return idx


def test_corrector_parities_on_mirror_mesh():
    mesh = build_cell_mesh(DISK, 0.05)
    chi1, _ = solve_corrector(mesh, i=1)
    chi2, _ = solve_corrector(mesh, i=2)
    r1, r2 = _reflect_index(mesh, 0), _reflect_index(mesh, 1)
    rep = mesh.periodic_representative
    c1, c2 = chi1[rep], chi2[rep]
    assert np.abs(c1).max() > 1e-3
    # chi^1 is odd under y1 -> 1 - y1 and even under y2 -> 1 - y2; chi^2 the reverse
    assert np.abs(c1 + c1[rep[r1]]).max() < 1e-8
    assert np.abs(c1 - c1[rep[r2]]).max() < 1e-8
    assert np.abs(c2 + c2[rep[r2]]).max() < 1e-8
    assert np.abs(c2 - c2[rep[r1]]).max() < 1e-8


def test_corrector_zero_mean():
    from perfhom.fem import assemble_mass
    mesh = build_cell_mesh(DISK, 0.05)
    chi, _ = solve_corrector(mesh, i=1)
    M = assemble_mass(mesh).matrix
    assert abs((M @ chi).sum()) < 1e-12


def test_corrector_weak_form():
    """int a grad(chi - y_1) . grad v = 0 for periodic v built from random DOF values."""
    from perfhom.fem import DofMap, assemble_stiffness
    mesh = build_cell_mesh(DISK, 0.05)
    chi, _ = solve_corrector(mesh, i=1)
    K = assemble_stiffness(mesh).matrix
    dm = DofMap.periodic(mesh)
    v = dm.expand(np.random.default_rng(0).standard_normal(dm.n_dofs))
    w = chi - mesh.nodes[:, 0]
    assert abs(v @ (K @ w)) < 1e-9 * np.linalg.norm(v) * np.linalg.norm(K @ mesh.nodes[:, 0])


def test_disk_B_isotropic_bounded_and_convergent():
    Bs = [solve_cell(DISK, h).B for h in (0.04, 0.02, 0.01)]
    for B in Bs:
        assert abs(B[0, 1]) < 1e-6 and abs(B[1, 0]) < 1e-6
        assert 0 < B[0, 0] < THETA and 0 < B[1, 1] < THETA
        assert ellipticity_constant(B) > 0
    # the mesh is not symmetric under y1 <-> y2, so isotropy holds up to O(h^2)
    aniso = [abs(B[0, 0] - B[1, 1]) for B in Bs]
    assert aniso[2] < aniso[1] < aniso[0] and aniso[2] < 1e-5
    b = [B[0, 0] for B in Bs]
    order = math.log2((b[0] - b[1]) / (b[1] - b[2]))
    assert abs(order - 2) < 0.3


def test_theta_from_mesh_area():
    s = solve_cell(DISK, 0.02)
    assert abs(s.theta - THETA) < 1e-3


def test_ellipticity_examples():
    assert ellipticity_constant(np.eye(2)) == pytest.approx(1.0)
    assert ellipticity_constant(np.diag([2.0, 3.0])) == pytest.approx(2.0)
    assert ellipticity_constant(np.array([[2.0, 1.0], [0.0, 2.0]])) == pytest.approx(1.5)


def test_checker_coefficient_symmetric_B():
    cell = PeriodicCell(coefficient=Coefficient.checker(1.0, 5.0))
    s = solve_cell(cell, 0.05)
    assert abs(s.B[0, 1] - s.B[1, 0]) < 1e-8
    # harmonic mean < B < arithmetic mean for each diagonal entry
    hm, am = 2 / (1 + 1 / 5), 3.0
    assert hm < s.B[0, 0] < am


def test_non_symmetric_coefficient_no_hole():
    a = np.array([[2.0, 0.5], [-0.3, 1.5]])
    s = solve_cell(PeriodicCell(coefficient=Coefficient.constant(a)), 0.1)
    assert np.abs(s.B - a).max() < 1e-10


def test_dimension_error():
    mesh = build_cell_mesh(DISK, 0.1)
    with pytest.raises(DimensionError):
        homogenized_matrix(mesh, chi=np.zeros((2, 3)))


def test_non_elliptic_rejected():
    with pytest.raises(GeometryError):
        solve_cell(PeriodicCell(coefficient=Coefficient.constant(np.zeros((2, 2)))), 0.1)


def test_text_roundtrip():
    s = solve_cell(DISK, 0.1)
    r = cell_from_text(s.to_text())
    assert np.array_equal(r.B, s.B) and r.theta == s.theta and r.residuals == s.residuals


@settings(max_examples=8, deadline=None)
@given(c=st.floats(0.2, 20.0))
def test_scaling_covariance(c):
    base = solve_cell(DISK, 0.1)
    scaled = solve_cell(PeriodicCell(hole=DISK.hole, coefficient=Coefficient.constant(c)), 0.1)
    assert np.abs(scaled.B - c * base.B).max() < 1e-10 * c
    assert np.abs(scaled.chi - base.chi).max() < 1e-9
