import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from perfhom.errors import DimensionError, GeometryError, MeshError
from perfhom.fem import assemble_mass, assemble_stiffness
from perfhom.formats import field_from_text, field_to_text, mesh_from_text, mesh_to_text
from perfhom.geometry import (DIRICHLET_OUTER, NEUMANN_HOLE, PERIODIC_X, PERIODIC_Y, Disk, PeriodicCell,
                              Polygon, Rectangle, build_cell_mesh, build_perforated_mesh, fill_extend,
                              interpolation_matrix, rectangle_mesh, restrict, zero_extend)

UNIT = Rectangle()
DISK = PeriodicCell(hole=Disk((0.5, 0.5), 0.25))
THETA = 1 - math.pi / 16


def test_no_hole_cell_is_structured_and_fully_periodic():
    m = build_cell_mesh(PeriodicCell(), 0.25)
    assert m.n_nodes == 25 and m.n_triangles == 32
    assert len(m.hole_boundary) == 0
    assert len(m.edges[PERIODIC_X]) == 8 and len(m.edges[PERIODIC_Y]) == 8
    # independent DOFs: interior nodes plus one representative per periodic class
    assert len(np.unique(m.periodic_representative)) == 16


def test_disk_cell_area_and_chords():
    h = 0.05
    m = build_cell_mesh(DISK, h)
    assert abs(m.area - THETA) <= 2 * h * h
    e = m.hole_boundary
    chords = np.linalg.norm(m.nodes[e[:, 0]] - m.nodes[e[:, 1]], axis=1)
    assert chords.max() <= h
    r = np.linalg.norm(m.nodes[np.unique(e)] - 0.5, axis=1)
    assert np.allclose(r, 0.25, atol=1e-12)
    assert np.all(m.areas > 0)


def test_cell_boundary_edges_are_periodic_or_hole():
    m = build_cell_mesh(DISK, 0.1)
    n_tagged = sum(len(m.edges[t]) for t in (PERIODIC_X, PERIODIC_Y, NEUMANN_HOLE))
    assert n_tagged == len(m.boundary_edges)
    slave, master = m.periodic_pairs.T
    d = m.nodes[slave] - m.nodes[master]
    assert np.allclose(np.mod(d + 1e-12, 1.0), 0.0, atol=1e-9)
    assert not np.isin(master, slave).any()


def test_area_converges_at_second_order():
    errs = [abs(build_cell_mesh(DISK, h).area - THETA) for h in (0.04, 0.02, 0.01)]
    orders = [math.log2(errs[i] / errs[i + 1]) for i in range(2)]
    assert all(abs(o - 2) < 0.2 for o in orders)


def test_max_diameter_proportional_to_h():
    for h in (0.08, 0.04, 0.02):
        assert build_cell_mesh(DISK, h).h_max <= 1.5 * h


def test_hole_leaving_cell_rejected():
    with pytest.raises(GeometryError):
        PeriodicCell(hole=Disk((0.5, 0.5), 0.6))
    with pytest.raises(GeometryError):
        PeriodicCell(hole=Disk((0.5, 0.5), 0.5))


def test_too_coarse_h_rejected():
    with pytest.raises(MeshError):
        build_cell_mesh(DISK, 0.3)


def test_polygon_hole_cell():
    sq = PeriodicCell(hole=Polygon([(0.3, 0.3), (0.7, 0.3), (0.7, 0.7), (0.3, 0.7)]))
    m = build_cell_mesh(sq, 0.05)
    assert abs(m.area - 0.84) < 1e-12
    assert np.all(m.areas > 0)


def test_perforated_no_hole_full_square():
    pm = build_perforated_mesh(UNIT, PeriodicCell(), 0.25, 1 / 16)
    assert pm.n_holes == 0
    assert abs(pm.area - 1.0) < 1e-12
    assert len(pm.edges[NEUMANN_HOLE]) == 0


def test_perforated_volume_fraction_eps_quarter():
    pm = build_perforated_mesh(UNIT, DISK, 0.25, 0.25 * 0.1)
    assert pm.n_holes == 16
    assert abs(pm.volume_fraction - THETA) / THETA < 0.05


def test_perforated_eps_half_counts_holes():
    pm = build_perforated_mesh(UNIT, DISK, 0.5, 0.5 * 0.1)
    # brute force: a tile's hole counts when its closure lies inside D
    expected = 0
    for i in range(2):
        for j in range(2):
            c = np.array([0.5 * i + 0.25, 0.5 * j + 0.25])
            if c.min() - 0.125 > 0 and c.max() + 0.125 < 1:
                expected += 1
    assert pm.n_holes == expected == 4
    solid = build_perforated_mesh(UNIT, DISK, 0.5, 0.05, boundary_cells="solid")
    assert solid.n_holes == 0


def test_tiling_matches_template():
    eps = 0.25
    pm = build_perforated_mesh(UNIT, DISK, eps, eps * 0.1)
    tpl = build_cell_mesh(DISK, 0.1)
    ref = {tuple(np.round(p, 9)) for p in tpl.nodes}
    origin = np.array([0.5, 0.25])
    inside = np.all((pm.nodes >= origin - 1e-12) & (pm.nodes <= origin + eps + 1e-12), axis=1)
    local = {tuple(np.round((p - origin) / eps, 9)) for p in pm.nodes[inside]}
    assert local == ref


def test_holes_avoid_outer_boundary():
    pm = build_perforated_mesh(UNIT, DISK, 0.25, 0.025)
    outer = pm.tagged_nodes(DIRICHLET_OUTER)
    x = pm.nodes[outer]
    on_box = np.isclose(x, 0).any(axis=1) | np.isclose(x, 1).any(axis=1)
    assert on_box.all()


def test_eps_must_tile_domain():
    with pytest.raises(MeshError):
        build_perforated_mesh(UNIT, DISK, 0.3, 0.03)


# -- extensions -------------------------------------------------------------

@pytest.fixture(scope="module")
def pmesh():
    return build_perforated_mesh(UNIT, DISK, 0.25, 0.25 * 0.125)


def test_zero_extend_constant_has_measure_of_domain(pmesh):
    v = zero_extend(pmesh, np.ones(pmesh.n_nodes))
    M = assemble_mass(pmesh.background, elements=pmesh.solid).matrix
    assert abs(v @ M @ v - pmesh.area) < 1e-12


def test_zero_extend_zero_and_dimension(pmesh):
    assert not zero_extend(pmesh, np.zeros(pmesh.n_nodes)).any()
    with pytest.raises(DimensionError):
        zero_extend(pmesh, np.zeros(pmesh.n_nodes + 1))


def test_zero_extend_preserves_norm_and_restrict_inverts(pmesh):
    rng = np.random.default_rng(1)
    v = rng.standard_normal(pmesh.n_nodes)
    ext = zero_extend(pmesh, v)
    Mb = assemble_mass(pmesh.background, elements=pmesh.solid).matrix
    M = assemble_mass(pmesh).matrix
    assert abs(ext @ Mb @ ext - v @ M @ v) <= 1e-12 * (v @ M @ v)
    assert np.array_equal(restrict(pmesh, ext), v)


def test_fill_extend_reproduces_constants_and_affine(pmesh):
    c = fill_extend(pmesh, np.full(pmesh.n_nodes, 3.5))
    assert np.allclose(c, 3.5, atol=1e-12)
    x = fill_extend(pmesh, pmesh.nodes[:, 0])
    assert np.allclose(x, pmesh.background.nodes[:, 0], atol=1e-12)


def test_fill_extend_gradient_constant_stable():
    """Ratio |grad P v| / |grad v| for a smooth field, at two resolutions."""
    ratios = []
    for hc in (0.125, 0.0625):
        pm = build_perforated_mesh(UNIT, DISK, 0.25, 0.25 * hc)
        x = pm.nodes
        v = np.sin(3 * x[:, 0]) * np.cos(2 * x[:, 1]) + x[:, 0] * x[:, 1]
        P = fill_extend(pm, v)
        Kb = assemble_stiffness(pm.background).matrix
        K = assemble_stiffness(pm).matrix
        ratios.append(math.sqrt((P @ Kb @ P) / (v @ K @ v)))
    assert all(r >= 1.0 for r in ratios)
    assert abs(ratios[0] - ratios[1]) / ratios[1] < 0.1


def test_interpolation_matrix_exact_for_affine():
    m = rectangle_mesh(UNIT, 1 / 8)
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 1, size=(200, 2))
    I = interpolation_matrix(m, pts)
    f = 2 * m.nodes[:, 0] - 3 * m.nodes[:, 1] + 1
    assert np.allclose(I @ f, 2 * pts[:, 0] - 3 * pts[:, 1] + 1, atol=1e-12)


# -- text format ------------------------------------------------------------

def test_mesh_text_roundtrip():
    m = build_cell_mesh(DISK, 0.1)
    text, order = mesh_to_text(m)
    head = text.splitlines()[0].split()
    assert head[0] == "nodes" and int(head[1]) == m.n_nodes
    m2 = mesh_from_text(text)
    assert np.array_equal(m2.nodes, m.nodes[order])
    assert abs(m2.area - m.area) < 1e-14
    # lexicographic order
    assert np.all(np.diff(m2.nodes[:, 0]) >= 0)
    text2, _ = mesh_to_text(m2)
    assert text2 == text


def test_field_text_roundtrip():
    m = rectangle_mesh(UNIT, 0.25)
    v = np.arange(m.n_nodes, dtype=float) / 7
    mesh, fields = field_from_text(field_to_text(m, {"u": v}))
    _, order = mesh_to_text(m)
    assert np.array_equal(fields["u"], v[order])


def test_bad_mesh_text():
    with pytest.raises(MeshError):
        mesh_from_text("nodes 3 triangles 1 edges 0\n0 0\n1 0\n")
    with pytest.raises(MeshError):
        mesh_from_text("nodes 3 triangles 1 edges 0\n0 0\n1 0\n0 1\n0 1 5\n")


@settings(max_examples=20, deadline=None)
@given(r=st.floats(0.05, 0.3), cx=st.floats(0.35, 0.65), cy=st.floats(0.35, 0.65))
def test_random_disk_cells_mesh_validly(r, cx, cy):
    disk = Disk((cx, cy), r)
    if disk.clearance((1.0, 1.0)) <= 0.05:
        return
    cell = PeriodicCell(hole=disk)
    h = min(0.05, 0.5 * disk.clearance((1.0, 1.0)))
    m = build_cell_mesh(cell, h)
    assert np.all(m.areas > 0)
    assert abs(m.area - (1 - math.pi * r * r)) < 4 * h * h + 1e-3 * r
    assert sum(len(m.edges[t]) for t in (PERIODIC_X, PERIODIC_Y, NEUMANN_HOLE)) == len(m.boundary_edges)
