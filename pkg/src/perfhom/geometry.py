"""Reference cell, periodically perforated domains and their triangulations.

The cell mesher produces a boundary-fitted *template* of the whole cell
``Y`` (hole triangles included and flagged).  ``Y*`` is the solid part of
the template, the perforated domain is an affine tiling of the template and
the hole triangles of the tiling form the background mesh of the full
domain ``D`` used for extensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property, lru_cache

import numpy as np
import scipy.sparse as sp
from scipy.spatial import Delaunay, cKDTree

from .coefficients import Coefficient
from .errors import DimensionError, GeometryError, MeshError, SolverError

DIRICHLET_OUTER = "DIRICHLET_OUTER"
NEUMANN_HOLE = "NEUMANN_HOLE"
PERIODIC_X = "PERIODIC_X"
PERIODIC_Y = "PERIODIC_Y"
EDGE_TAGS = (DIRICHLET_OUTER, NEUMANN_HOLE, PERIODIC_X, PERIODIC_Y)


# ---------------------------------------------------------------------------
# holes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Disk:
    center: tuple
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise GeometryError("disk radius must be positive")

    @property
    def area(self):
        return math.pi * self.radius ** 2

    def contains(self, pts):
        pts = np.atleast_2d(pts)
        return np.hypot(pts[:, 0] - self.center[0], pts[:, 1] - self.center[1]) < self.radius

    def boundary_distance(self, pts):
        pts = np.atleast_2d(pts)
        d = np.hypot(pts[:, 0] - self.center[0], pts[:, 1] - self.center[1])
        return np.abs(d - self.radius)

    def clearance(self, lengths):
        cx, cy = self.center
        r = self.radius
        return min(cx - r, lengths[0] - cx - r, cy - r, lengths[1] - cy - r)

    def vertex_count(self, h):
        # multiple of 4 so the polygon keeps the symmetries of the disk
        return max(8, 4 * math.ceil(2 * math.pi * self.radius / (4 * 0.95 * h)))

    def boundary_points(self, h):
        n = self.vertex_count(h)
        t = 2 * math.pi * np.arange(n) / n
        return np.column_stack([self.center[0] + self.radius * np.cos(t),
                                self.center[1] + self.radius * np.sin(t)])

    def project(self, pts):
        c = np.asarray(self.center, dtype=float)
        d = pts - c
        return c + self.radius * d / np.linalg.norm(d, axis=1, keepdims=True)

    def is_centered(self, lengths):
        return (abs(self.center[0] - 0.5 * lengths[0]) < 1e-14
                and abs(self.center[1] - 0.5 * lengths[1]) < 1e-14)


@dataclass(frozen=True)
class Polygon:
    """Simple polygon hole; vertices listed in order (either orientation)."""

    vertices: tuple

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] != 2 or len(v) < 3:
            raise GeometryError("polygon hole needs at least three 2D vertices")
        object.__setattr__(self, "vertices", tuple(map(tuple, v.tolist())))

    @property
    def _v(self):
        return np.asarray(self.vertices, dtype=float)

    @property
    def area(self):
        x, y = self._v.T
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    def contains(self, pts):
        pts = np.atleast_2d(pts)
        v = self._v
        inside = np.zeros(len(pts), dtype=bool)
        x, y = pts[:, 0], pts[:, 1]
        for (x1, y1), (x2, y2) in zip(v, np.roll(v, -1, axis=0)):
            crosses = (y1 > y) != (y2 > y)
            with np.errstate(divide="ignore", invalid="ignore"):
                xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (x < xint)
        return inside

    def boundary_distance(self, pts):
        pts = np.atleast_2d(pts)
        v = self._v
        best = np.full(len(pts), np.inf)
        for a, b in zip(v, np.roll(v, -1, axis=0)):
            ab = b - a
            s = np.clip(((pts - a) @ ab) / (ab @ ab), 0.0, 1.0)
            best = np.minimum(best, np.linalg.norm(pts - (a + s[:, None] * ab), axis=1))
        return best

    def clearance(self, lengths):
        v = self._v
        return float(min(v[:, 0].min(), lengths[0] - v[:, 0].max(),
                         v[:, 1].min(), lengths[1] - v[:, 1].max()))

    def boundary_points(self, h):
        v = self._v
        out = []
        for a, b in zip(v, np.roll(v, -1, axis=0)):
            n = max(1, math.ceil(np.linalg.norm(b - a) / (0.95 * h)))
            s = np.arange(n)[:, None] / n
            out.append(a + s * (b - a))
        return np.vstack(out)

    def project(self, pts):
        return pts

    def is_centered(self, lengths):
        return False


# ---------------------------------------------------------------------------
# cell and domain descriptors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PeriodicCell:
    """Periodicity cell ``Y = [0, l1) x [0, l2)`` with optional hole ``S``."""

    lengths: tuple = (1.0, 1.0)
    hole: Disk | Polygon | None = None
    coefficient: Coefficient = field(default_factory=Coefficient.identity)
    alpha: float | None = None
    bound: float | None = None

    def __post_init__(self):
        l1, l2 = (float(v) for v in self.lengths)
        if l1 <= 0 or l2 <= 0:
            raise GeometryError("cell lengths must be positive")
        object.__setattr__(self, "lengths", (l1, l2))
        if self.hole is not None and self.hole.clearance(self.lengths) <= 0:
            raise GeometryError(
                f"hole closure is not strictly inside the cell (clearance "
                f"{self.hole.clearance(self.lengths):.4g})")

    @property
    def area(self):
        return self.lengths[0] * self.lengths[1]

    @property
    def clearance(self):
        return math.inf if self.hole is None else self.hole.clearance(self.lengths)

    @property
    def volume_fraction(self):
        return 1.0 if self.hole is None else 1.0 - self.hole.area / self.area

    def check_coefficient(self, points=None):
        """Validate ellipticity and boundedness; return the measured constant."""
        alpha = self.coefficient.ellipticity(points)
        if not alpha > 0:
            raise GeometryError(f"coefficient is not uniformly elliptic (min eigenvalue {alpha:.3g})")
        if self.alpha is not None and alpha < self.alpha * (1 - 1e-12):
            raise GeometryError(f"measured ellipticity {alpha:.6g} below declared {self.alpha:.6g}")
        sup = self.coefficient.sup_norm(points)
        if self.bound is not None and sup > self.bound * (1 + 1e-12):
            raise GeometryError(f"coefficient bound {sup:.6g} exceeds declared {self.bound:.6g}")
        return alpha


@dataclass(frozen=True)
class Rectangle:
    x0: float = 0.0
    y0: float = 0.0
    x1: float = 1.0
    y1: float = 1.0

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise GeometryError("degenerate rectangle")

    @property
    def extents(self):
        return (self.x1 - self.x0, self.y1 - self.y0)

    @property
    def area(self):
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    @property
    def origin(self):
        return (self.x0, self.y0)


# ---------------------------------------------------------------------------
# meshes
# ---------------------------------------------------------------------------

class TriMesh:
    """Conforming P1 triangulation with tagged boundary edges."""

    def __init__(self, nodes, triangles, edges=None):
        nodes = np.array(nodes, dtype=float)
        tris = np.array(triangles, dtype=np.int64)
        if nodes.ndim != 2 or nodes.shape[1] != 2:
            raise MeshError("nodes must have shape (n, 2)")
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise MeshError("triangles must have shape (t, 3)")
        p = nodes[tris]
        det = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
               - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
        flip = det < 0
        tris[flip] = tris[flip][:, [0, 2, 1]]
        if np.any(np.abs(det) <= 1e-14 * max(1.0, float(np.abs(det).max(initial=0.0)))):
            raise MeshError("mesh contains degenerate (zero-area) triangles")
        self.nodes = nodes
        self.triangles = tris
        self.edges = {k: np.asarray(v, dtype=np.int64).reshape(-1, 2) for k, v in (edges or {}).items()}
        self.nodes.setflags(write=False)
        self.triangles.setflags(write=False)

    def __repr__(self):
        tags = {k: len(v) for k, v in self.edges.items()}
        return f"{type(self).__name__}(nodes={self.n_nodes}, triangles={self.n_triangles}, edges={tags})"

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def n_triangles(self):
        return len(self.triangles)

    @cached_property
    def areas(self):
        p = self.nodes[self.triangles]
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))

    @property
    def area(self):
        return float(self.areas.sum())

    @cached_property
    def gradients(self):
        """Gradients of the three P1 basis functions per triangle, shape (t, 3, 2)."""
        p = self.nodes[self.triangles]
        x, y = p[..., 0], p[..., 1]
        a2 = (2 * self.areas)[:, None]
        gx = np.column_stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]]) / a2
        gy = np.column_stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]]) / a2
        return np.stack([gx, gy], axis=-1)

    @cached_property
    def centroids(self):
        return self.nodes[self.triangles].mean(axis=1)

    def quadrature_points(self):
        """Degree-2 three-point rule: points (t, 3, 2), equal weights 1/3."""
        p = self.nodes[self.triangles]
        bary = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
        return np.einsum("qk,tkd->tqd", bary, p)

    @cached_property
    def unique_edges(self):
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def boundary_edges(self):
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        u, counts = np.unique(e, axis=0, return_counts=True)
        return u[counts == 1]

    @property
    def h_max(self):
        e = self.unique_edges
        return float(np.linalg.norm(self.nodes[e[:, 0]] - self.nodes[e[:, 1]], axis=1).max())

    def tagged_nodes(self, tag):
        e = self.edges.get(tag)
        if e is None or len(e) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.unique(e)


class CellMesh(TriMesh):
    """Triangulation of ``Y*`` with periodic identification of opposite sides.

    ``periodic_pairs`` lists ``(slave, master)`` node pairs; masters lie on
    the sides ``y1 = 0`` / ``y2 = 0`` and every corner maps to the origin.
    """

    def __init__(self, nodes, triangles, edges, cell, h, periodic_pairs, template=None,
                 template_ids=None):
        super().__init__(nodes, triangles, edges)
        self.cell = cell
        self.h = float(h)
        self.periodic_pairs = np.asarray(periodic_pairs, dtype=np.int64).reshape(-1, 2)
        self.template = template
        self.template_ids = template_ids

    @property
    def hole_boundary(self):
        return self.edges.get(NEUMANN_HOLE, np.zeros((0, 2), dtype=np.int64))

    @cached_property
    def periodic_representative(self):
        rep = np.arange(self.n_nodes)
        rep[self.periodic_pairs[:, 0]] = self.periodic_pairs[:, 1]
        return rep


class PerforatedMesh(TriMesh):
    """Mesh of ``D_eps`` embedded node-for-node in a background mesh of ``D``."""

    def __init__(self, nodes, triangles, edges, eps, cell, domain, background, solid,
                 node_ids, hole_id, n_holes, template_h):
        super().__init__(nodes, triangles, edges)
        self.eps = float(eps)
        self.cell = cell
        self.domain = domain
        self.background = background
        self.solid = np.asarray(solid, dtype=bool)
        self.node_ids = np.asarray(node_ids, dtype=np.int64)
        self.hole_id = np.asarray(hole_id, dtype=np.int64)
        self.n_holes = int(n_holes)
        self.template_h = float(template_h)

    @property
    def volume_fraction(self):
        return self.area / self.domain.area

    @cached_property
    def hole_interior_nodes(self):
        mask = np.ones(self.background.n_nodes, dtype=bool)
        mask[self.node_ids] = False
        return np.flatnonzero(mask)

    @cached_property
    def fill_operator(self):
        return _harmonic_fill_operator(self)


# ---------------------------------------------------------------------------
# mesh generation helpers
# ---------------------------------------------------------------------------

def _segment(p, q, h, include_end=True):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    n = max(1, math.ceil(np.linalg.norm(q - p) / h - 1e-9))
    s = np.arange(n + 1 if include_end else n)[:, None] / n
    return p + s * (q - p)


def _hex_lattice(box, h, anchor):
    """Triangular lattice of spacing h, anchored on a row through ``anchor``."""
    xa, xb, ya, yb = box
    dy = 0.5 * math.sqrt(3.0) * h
    j0 = math.floor((ya - anchor[1]) / dy) - 1
    j1 = math.ceil((yb - anchor[1]) / dy) + 1
    pts = []
    for j in range(j0, j1 + 1):
        y = anchor[1] + j * dy
        off = 0.5 * h if j % 2 else 0.0
        i0 = math.floor((xa - anchor[0] - off) / h) - 1
        i1 = math.ceil((xb - anchor[0] - off) / h) + 1
        x = anchor[0] + off + h * np.arange(i0, i1 + 1)
        pts.append(np.column_stack([x, np.full_like(x, y)]))
    return np.vstack(pts)


def _merge_close_nodes(nodes, tris, tol):
    """Merge coincident nodes (within ``tol``); keeps first-occurrence order."""
    tree = cKDTree(nodes)
    pairs = tree.query_pairs(tol, output_type="ndarray")
    parent = np.arange(len(nodes))
    if len(pairs):
        g = sp.coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])),
                          shape=(len(nodes), len(nodes)))
        _, labels = sp.csgraph.connected_components(g, directed=False)
        first = np.full(labels.max() + 1, len(nodes))
        np.minimum.at(first, labels, np.arange(len(nodes)))
        parent = first[labels]
    keep = np.unique(parent)
    newidx = np.full(len(nodes), -1, dtype=np.int64)
    newidx[keep] = np.arange(len(keep))
    return nodes[keep], newidx[parent][tris], newidx[parent]


def _delaunay(points, h, classify):
    tri = Delaunay(points)
    simp = tri.simplices.astype(np.int64)
    p = points[simp]
    det = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
           - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
    simp = simp[np.abs(det) > 1e-10 * h * h]
    if len(np.unique(simp)) != len(points):
        raise MeshError("triangulation dropped seed points; reduce h")
    in_hole = classify(points[simp].mean(axis=1))
    return simp, in_hole


def _interface_edges(tris, in_hole):
    """Edges shared by one hole triangle and one solid triangle."""
    e = np.sort(tris[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    flag = np.repeat(in_hole, 3)
    u, inv = np.unique(e, axis=0, return_inverse=True)
    inv = inv.ravel()
    nh = np.bincount(inv, weights=flag.astype(float), minlength=len(u))
    ns = np.bincount(inv, weights=(~flag).astype(float), minlength=len(u))
    return u[(nh == 1) & (ns == 1)]


def _check_hole_edges(tris, in_hole, points, hole):
    if hole is None:
        return
    iface = _interface_edges(tris, in_hole)
    # every node on an interface edge must lie on the hole boundary
    nodes = np.unique(iface)
    scale = math.sqrt(hole.area)
    if len(nodes) == 0 or hole.boundary_distance(points[nodes]).max() > 1e-9 * scale:
        raise MeshError("hole boundary not recovered by the triangulation; reduce h")


@dataclass(frozen=True)
class CellTemplate:
    """Triangulation of the whole cell with hole triangles flagged."""

    nodes: np.ndarray
    triangles: np.ndarray
    in_hole: np.ndarray
    cell: PeriodicCell
    h: float

    @property
    def interface(self):
        return _interface_edges(self.triangles, self.in_hole)


def _base_quarter(cell, h0):
    l1, l2 = cell.lengths
    cx, cy = 0.5 * l1, 0.5 * l2
    hole = cell.hole
    r = hole.radius
    n1 = 2 * math.ceil(l1 / (2 * h0))
    n2 = 2 * math.ceil(l2 / (2 * h0))
    q = hole.vertex_count(h0) // 4
    seeds = [
        _segment((0, 0), (cx, 0), l1 / n1 * 1.000001),
        _segment((0, 0), (0, cy), l2 / n2 * 1.000001),
        _segment((0, cy), (cx - r, cy), h0),
        _segment((cx - r, cy), (cx, cy), h0),
        _segment((cx, 0), (cx, cy - r), h0),
        _segment((cx, cy - r), (cx, cy), h0),
    ]
    t = math.pi + 0.5 * math.pi * np.arange(1, q) / q
    seeds.append(np.column_stack([cx + r * np.cos(t), cy + r * np.sin(t)]))
    lat = _hex_lattice((0, cx, 0, cy), h0, (cx, cy))
    ok = ((lat[:, 0] > 0.5 * h0) & (lat[:, 0] < cx - 0.5 * h0)
          & (lat[:, 1] > 0.5 * h0) & (lat[:, 1] < cy - 0.5 * h0)
          & (hole.boundary_distance(lat) > 0.7 * h0))
    seeds.append(lat[ok])
    pts = np.vstack(seeds)
    pts, _, _ = _merge_close_nodes(pts, np.zeros((0, 3), dtype=np.int64), 1e-9 * h0)
    tris, in_hole = _delaunay(pts, h0, hole.contains)
    _check_hole_edges(tris, in_hole, pts, hole)

    # mirror across x = cx, then across y = cy
    def mirror(p, t, f, axis, value):
        q = p.copy()
        q[:, axis] = 2 * value - q[:, axis]
        n = len(p)
        nodes = np.vstack([p, q])
        tt = np.vstack([t, t[:, [0, 2, 1]] + n])
        nodes, tt, _ = _merge_close_nodes(nodes, tt, 1e-9 * h0)
        return nodes, tt, np.concatenate([f, f])

    pts, tris, in_hole = mirror(pts, tris, in_hole, 0, cx)
    pts, tris, in_hole = mirror(pts, tris, in_hole, 1, cy)
    return pts, tris, in_hole


def _base_general(cell, h0):
    l1, l2 = cell.lengths
    hole = cell.hole
    n1 = math.ceil(l1 / h0)
    n2 = math.ceil(l2 / h0)
    corners = [(0, 0), (l1, 0), (l1, l2), (0, l2), (0, 0)]
    hs = [l1 / n1, l2 / n2, l1 / n1, l2 / n2]
    seeds = [_segment(a, b, hh * 1.000001, include_end=False)
             for a, b, hh in zip(corners[:-1], corners[1:], hs)]
    seeds.append(hole.boundary_points(h0))
    lat = _hex_lattice((0, l1, 0, l2), h0, (0.5 * l1, 0.5 * l2))
    ok = ((lat[:, 0] > 0.5 * h0) & (lat[:, 0] < l1 - 0.5 * h0)
          & (lat[:, 1] > 0.5 * h0) & (lat[:, 1] < l2 - 0.5 * h0)
          & (hole.boundary_distance(lat) > 0.7 * h0))
    seeds.append(lat[ok])
    pts = np.vstack(seeds)
    pts, _, _ = _merge_close_nodes(pts, np.zeros((0, 3), dtype=np.int64), 1e-9 * h0)
    tris, in_hole = _delaunay(pts, h0, hole.contains)
    _check_hole_edges(tris, in_hole, pts, hole)
    return pts, tris, in_hole


def _structured(l1, l2, n1, n2, origin=(0.0, 0.0)):
    x = origin[0] + l1 * np.arange(n1 + 1) / n1
    y = origin[1] + l2 * np.arange(n2 + 1) / n2
    X, Y = np.meshgrid(x, y, indexing="xy")
    nodes = np.column_stack([X.ravel(), Y.ravel()])
    i, j = np.meshgrid(np.arange(n1), np.arange(n2), indexing="xy")
    a = (j * (n1 + 1) + i).ravel()
    b, c, d = a + 1, a + n1 + 2, a + n1 + 1
    tris = np.vstack([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
    return nodes, tris


def refine_uniform(nodes, tris, in_hole, hole=None):
    """Split every triangle in four; midpoints of hole-interface edges are
    projected back onto the exact hole boundary."""
    e = np.sort(tris[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    u, inv = np.unique(e, axis=0, return_inverse=True)
    inv = inv.reshape(-1, 3)
    mids = 0.5 * (nodes[u[:, 0]] + nodes[u[:, 1]])
    if hole is not None and in_hole.any():
        iface = _interface_edges(tris, in_hole)
        key = {tuple(r) for r in iface.tolist()}
        on = np.array([tuple(r) in key for r in u.tolist()])
        if on.any():
            mids[on] = hole.project(mids[on])
    n = len(nodes)
    m = inv + n
    a, b, c = tris[:, 0], tris[:, 1], tris[:, 2]
    mab, mbc, mca = m[:, 0], m[:, 1], m[:, 2]
    new = np.vstack([
        np.column_stack([a, mab, mca]),
        np.column_stack([mab, b, mbc]),
        np.column_stack([mca, mbc, c]),
        np.column_stack([mab, mbc, mca]),
    ])
    return np.vstack([nodes, mids]), new, np.tile(in_hole, 4)


@lru_cache(maxsize=32)
def cell_template(cell: PeriodicCell, h: float) -> CellTemplate:
    """Boundary-fitted triangulation of the full cell (hole triangles flagged)."""
    l1, l2 = cell.lengths
    h = float(h)
    if not h > 0:
        raise MeshError("mesh size must be positive")
    if h > min(l1, l2) / 4 + 1e-14:
        raise MeshError(f"h={h:g} exceeds a quarter of the smallest cell length")
    if cell.hole is None:
        n1, n2 = math.ceil(l1 / h - 1e-9), math.ceil(l2 / h - 1e-9)
        nodes, tris = _structured(l1, l2, n1, n2)
        return CellTemplate(nodes, tris, np.zeros(len(tris), dtype=bool), cell, h)
    clear = cell.clearance
    if h >= clear:
        raise MeshError(f"h={h:g} not below the hole clearance {clear:g}")
    hmax = min(clear, min(l1, l2) / 2, 2 * cell.hole.area ** 0.5) / 1.5
    k = 0
    while h * 2 ** (k + 1) <= hmax:
        k += 1
    h0 = h * 2 ** k
    if isinstance(cell.hole, Disk) and cell.hole.is_centered(cell.lengths):
        nodes, tris, in_hole = _base_quarter(cell, h0)
    else:
        nodes, tris, in_hole = _base_general(cell, h0)
    for _ in range(k):
        nodes, tris, in_hole = refine_uniform(nodes, tris, in_hole, cell.hole)
    # snap the periodic sides exactly
    for axis, L in ((0, l1), (1, l2)):
        col = nodes[:, axis]
        col[np.abs(col) < 1e-12 * L] = 0.0
        col[np.abs(col - L) < 1e-12 * L] = L
    TriMesh(nodes, tris)  # validates positivity of every triangle
    return CellTemplate(nodes, tris, in_hole, cell, h)


def _side_edges(nodes, edges, axis, values, tol):
    on = np.zeros(len(edges), dtype=bool)
    for v in values:
        on |= (np.abs(nodes[edges[:, 0], axis] - v) < tol) & (np.abs(nodes[edges[:, 1], axis] - v) < tol)
    return edges[on]


def build_cell_mesh(cell: PeriodicCell, h: float) -> CellMesh:
    """Triangulate ``Y*`` with periodic pairing of opposite sides."""
    tpl = cell_template(cell, h)
    l1, l2 = cell.lengths
    solid = ~tpl.in_hole
    used = np.unique(tpl.triangles[solid])
    newidx = np.full(len(tpl.nodes), -1, dtype=np.int64)
    newidx[used] = np.arange(len(used))
    nodes = tpl.nodes[used]
    tris = newidx[tpl.triangles[solid]]
    hole_edges = newidx[tpl.interface] if cell.hole is not None else np.zeros((0, 2), dtype=np.int64)

    tmp = TriMesh(nodes, tris)
    bnd = tmp.boundary_edges
    tol = 1e-9 * min(l1, l2)
    ex = _side_edges(nodes, bnd, 0, (0.0, l1), tol)
    ey = _side_edges(nodes, bnd, 1, (0.0, l2), tol)
    if len(ex) + len(ey) + len(hole_edges) != len(bnd):
        raise MeshError("boundary edges neither periodic nor on the hole")

    # canonical position modulo the cell; masters sit at the canonical spot
    canon = nodes.copy()
    canon[np.abs(canon[:, 0] - l1) < tol, 0] = 0.0
    canon[np.abs(canon[:, 1] - l2) < tol, 1] = 0.0
    moved = np.flatnonzero(np.any(canon != nodes, axis=1))
    tree = cKDTree(nodes)
    dist, master = tree.query(canon[moved])
    if len(moved) and (dist.max() > tol or np.any(np.isin(master, moved))):
        raise MeshError("periodic sides do not match node for node")
    pairs = np.column_stack([moved, master]) if len(moved) else np.zeros((0, 2), dtype=np.int64)
    edges = {NEUMANN_HOLE: hole_edges, PERIODIC_X: ex, PERIODIC_Y: ey}
    return CellMesh(nodes, tris, edges, cell, h, pairs, template=tpl, template_ids=used)


def rectangle_mesh(domain: Rectangle, h: float) -> TriMesh:
    """Structured mesh of a rectangle, outer boundary tagged Dirichlet."""
    lx, ly = domain.extents
    n1, n2 = math.ceil(lx / h - 1e-9), math.ceil(ly / h - 1e-9)
    nodes, tris = _structured(lx, ly, n1, n2, domain.origin)
    m = TriMesh(nodes, tris)
    return TriMesh(nodes, tris, {DIRICHLET_OUTER: m.boundary_edges})


def build_perforated_mesh(domain: Rectangle, cell: PeriodicCell, eps: float, h: float,
                          boundary_cells: str = "perforate") -> PerforatedMesh:
    """Tile ``domain`` with eps-scaled copies of the cell template.

    Every tile that lies fully inside ``domain`` is perforated.  With
    ``boundary_cells="solid"`` the tiles adjacent to the outer boundary keep
    their hole filled instead.
    """
    if boundary_cells not in ("perforate", "solid"):
        raise ValueError("boundary_cells must be 'perforate' or 'solid'")
    eps = float(eps)
    if not eps > 0 or eps > min(domain.extents):
        raise MeshError("eps must be positive and not exceed the domain extent")
    l1, l2 = cell.lengths
    counts = []
    for ext, L in zip(domain.extents, (l1, l2)):
        c = ext / (eps * L)
        if abs(c - round(c)) > 1e-8 * max(1.0, c):
            raise MeshError(f"domain extent {ext:g} is not a multiple of eps*l = {eps * L:g}")
        counts.append(int(round(c)))
    nx, ny = counts
    tpl = cell_template(cell, h / eps)
    nt = len(tpl.nodes)

    nodes, tris, solid, hole_id = [], [], [], []
    n_holes = 0
    for j in range(ny):
        for i in range(nx):
            origin = np.array([domain.x0 + eps * i * l1, domain.y0 + eps * j * l2])
            k = len(nodes)
            nodes.append(origin + eps * tpl.nodes)
            tris.append(tpl.triangles + k * nt)
            edge_cell = i in (0, nx - 1) or j in (0, ny - 1)
            perforate = cell.hole is not None and not (boundary_cells == "solid" and edge_cell)
            if perforate:
                solid.append(~tpl.in_hole)
                hole_id.append(np.where(tpl.in_hole, n_holes, -1))
                n_holes += 1
            else:
                solid.append(np.ones(len(tpl.triangles), dtype=bool))
                hole_id.append(np.full(len(tpl.triangles), -1))
    allnodes = np.vstack(nodes)
    alltris = np.vstack(tris)
    allnodes, alltris, _ = _merge_close_nodes(allnodes, alltris, 1e-9 * eps * tpl.h)
    solid = np.concatenate(solid)
    hole_id = np.concatenate(hole_id)

    bg0 = TriMesh(allnodes, alltris)
    background = TriMesh(allnodes, alltris, {DIRICHLET_OUTER: bg0.boundary_edges})

    node_ids = np.unique(alltris[solid])
    newidx = np.full(len(allnodes), -1, dtype=np.int64)
    newidx[node_ids] = np.arange(len(node_ids))
    ptris = newidx[alltris[solid]]
    pnodes = allnodes[node_ids]
    outer = newidx[background.edges[DIRICHLET_OUTER]]
    tmp = TriMesh(pnodes, ptris)
    bnd = tmp.boundary_edges
    outer_set = {tuple(r) for r in np.sort(outer, axis=1).tolist()}
    is_outer = np.array([tuple(r) in outer_set for r in bnd.tolist()], dtype=bool)
    edges = {DIRICHLET_OUTER: bnd[is_outer], NEUMANN_HOLE: bnd[~is_outer]}
    if is_outer.sum() != len(outer):
        raise MeshError("non-conforming template stitching along the outer boundary")
    return PerforatedMesh(pnodes, ptris, edges, eps, cell, domain, background, solid,
                          node_ids, hole_id, n_holes, tpl.h)


# ---------------------------------------------------------------------------
# extensions to the full domain
# ---------------------------------------------------------------------------

def _check_field(mesh, field):
    v = np.asarray(field, dtype=float)
    if v.shape[0] != mesh.n_nodes:
        raise DimensionError(f"field has {v.shape[0]} values, mesh has {mesh.n_nodes} nodes")
    return v


def zero_extend(mesh: PerforatedMesh, field):
    """Extend nodal values on ``D_eps`` by zero to the background nodes.

    The extended function vanishes on every hole triangle, so its L2 norm
    over ``D`` is computed with the mass matrix of the solid triangles
    (see :func:`perfhom.fem.assemble_mass` with ``elements=mesh.solid``).
    Works column-wise for arrays of shape (n_nodes, k).
    """
    v = _check_field(mesh, field)
    out = np.zeros((mesh.background.n_nodes,) + v.shape[1:])
    out[mesh.node_ids] = v
    return out


def restrict(mesh: PerforatedMesh, background_field):
    v = np.asarray(background_field)
    if v.shape[0] != mesh.background.n_nodes:
        raise DimensionError("field is not defined on the background nodes")
    return v[mesh.node_ids]


def _harmonic_fill_operator(mesh: PerforatedMesh):
    bg = mesh.background
    n_bg, n = bg.n_nodes, mesh.n_nodes
    pos = np.full(n_bg, -1, dtype=np.int64)
    pos[mesh.node_ids] = np.arange(n)
    rows = [mesh.node_ids]
    cols = [np.arange(n)]
    vals = [np.ones(n)]
    g = bg.gradients
    ke = bg.areas[:, None, None] * np.einsum("tid,tjd->tij", g, g)
    for hid in range(mesh.n_holes):
        tmask = np.flatnonzero(mesh.hole_id == hid)
        tri = bg.triangles[tmask]
        local = np.unique(tri)
        interior = local[pos[local] < 0]
        if len(interior) == 0:
            continue
        boundary = local[pos[local] >= 0]
        idx = {v: k for k, v in enumerate(local.tolist())}
        A = np.zeros((len(local), len(local)))
        li = np.vectorize(idx.get)(tri)
        np.add.at(A, (li[:, :, None], li[:, None, :]), ke[tmask])
        ii = [idx[v] for v in interior.tolist()]
        bb = [idx[v] for v in boundary.tolist()]
        try:
            X = -np.linalg.solve(A[np.ix_(ii, ii)], A[np.ix_(ii, bb)])
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"harmonic fill failed in hole {hid}") from exc
        r, c = np.meshgrid(interior, pos[boundary], indexing="ij")
        rows.append(r.ravel())
        cols.append(c.ravel())
        vals.append(X.ravel())
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(n_bg, n))


def fill_extend(mesh: PerforatedMesh, field):
    """Extend to the background mesh, filling each hole with the discrete
    harmonic extension of the field's trace on the hole boundary."""
    v = _check_field(mesh, field)
    return mesh.fill_operator @ v


# ---------------------------------------------------------------------------
# point location / interpolation between meshes
# ---------------------------------------------------------------------------

def interpolation_matrix(mesh: TriMesh, points, tol=1e-10):
    """Sparse P1 interpolation from ``mesh`` nodal values to ``points``."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    tree = cKDTree(mesh.centroids)
    k = min(12, mesh.n_triangles)
    _, cand = tree.query(pts, k=k)
    cand = cand.reshape(len(pts), k)
    found = np.full(len(pts), -1, dtype=np.int64)
    bary = np.zeros((len(pts), 3))
    for c in range(k):
        todo = np.flatnonzero(found < 0)
        if len(todo) == 0:
            break
        t = cand[todo, c]
        lam = _barycentric(mesh, t, pts[todo])
        ok = lam.min(axis=1) >= -tol
        found[todo[ok]] = t[ok]
        bary[todo[ok]] = lam[ok]
    missing = np.flatnonzero(found < 0)
    for p in missing:  # brute force fallback
        lam = _barycentric(mesh, np.arange(mesh.n_triangles), np.repeat(pts[p:p + 1], mesh.n_triangles, 0))
        best = int(np.argmax(lam.min(axis=1)))
        if lam[best].min() < -1e-8:
            raise GeometryError(f"point {pts[p]} lies outside the mesh")
        found[p], bary[p] = best, lam[best]
    rows = np.repeat(np.arange(len(pts)), 3)
    cols = mesh.triangles[found].ravel()
    return sp.csr_matrix((bary.ravel(), (rows, cols)), shape=(len(pts), mesh.n_nodes))


def _barycentric(mesh, t, pts):
    p = mesh.nodes[mesh.triangles[t]]
    g = mesh.gradients[t]
    lam = np.einsum("tkd,td->tk", g, pts - p[:, 0, :])
    lam[:, 0] += 1.0
    return lam
