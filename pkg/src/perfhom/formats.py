"""Plain-text exchange formats for meshes, nodal fields and CSV tables."""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np

from .errors import MeshError
from .geometry import EDGE_TAGS, TriMesh


def _fmt(v):
    return f"{float(v):.17g}"


def _sorted_order(nodes):
    # lexicographic by (x, y); np.lexsort is stable so ties keep insertion order
    return np.lexsort((nodes[:, 1], nodes[:, 0]))


def mesh_to_text(mesh: TriMesh, sort_nodes=True):
    """Serialize a mesh; nodes are renumbered in lexicographic order."""
    order = _sorted_order(mesh.nodes) if sort_nodes else np.arange(mesh.n_nodes)
    new = np.empty(mesh.n_nodes, dtype=np.int64)
    new[order] = np.arange(mesh.n_nodes)
    edges = [(tag, new[e]) for tag in EDGE_TAGS for e in [mesh.edges.get(tag)] if e is not None]
    n_edges = sum(len(e) for _, e in edges)
    out = io.StringIO()
    out.write(f"nodes {mesh.n_nodes} triangles {mesh.n_triangles} edges {n_edges}\n")
    for x, y in mesh.nodes[order]:
        out.write(f"{_fmt(x)} {_fmt(y)}\n")
    for i, j, k in new[mesh.triangles]:
        out.write(f"{i} {j} {k}\n")
    for tag, e in edges:
        for i, j in e:
            out.write(f"{i} {j} {tag}\n")
    return out.getvalue(), order


def _parse_mesh(lines, start=0):
    try:
        head = lines[start].split()
        if len(head) != 6 or head[0] != "nodes" or head[2] != "triangles" or head[4] != "edges":
            raise MeshError(f"line {start + 1}: bad mesh header {lines[start]!r}")
        n, t, e = int(head[1]), int(head[3]), int(head[5])
        pos = start + 1
        nodes = np.array([[float(v) for v in lines[pos + k].split()] for k in range(n)]).reshape(n, 2)
        pos += n
        tris = np.array([[int(v) for v in lines[pos + k].split()] for k in range(t)], dtype=np.int64).reshape(t, 3)
        pos += t
        edges = {}
        for k in range(e):
            i, j, tag = lines[pos + k].split()
            if tag not in EDGE_TAGS:
                raise MeshError(f"line {pos + k + 1}: unknown edge tag {tag!r}")
            edges.setdefault(tag, []).append((int(i), int(j)))
        pos += e
    except (IndexError, ValueError) as exc:
        raise MeshError(f"malformed mesh text: {exc}") from exc
    if t and (tris.min() < 0 or tris.max() >= n):
        raise MeshError("triangle index out of range")
    return TriMesh(nodes, tris, {k: np.array(v) for k, v in edges.items()}), pos


def mesh_from_text(text):
    mesh, _ = _parse_mesh(text.splitlines())
    return mesh


def write_mesh(path, mesh):
    text, _ = mesh_to_text(mesh)
    Path(path).write_text(text)


def read_mesh(path):
    return mesh_from_text(Path(path).read_text())


def field_to_text(mesh, fields: dict):
    """Mesh block followed by ``field <name>`` blocks of nodal values."""
    text, order = mesh_to_text(mesh)
    out = [text]
    for name, values in fields.items():
        v = np.asarray(values, dtype=float)
        if v.shape != (mesh.n_nodes,):
            raise MeshError(f"field {name!r} has shape {v.shape}, mesh has {mesh.n_nodes} nodes")
        out.append(f"field {name}\n")
        out.append("".join(_fmt(x) + "\n" for x in v[order]))
    return "".join(out)


def field_from_text(text):
    lines = text.splitlines()
    mesh, pos = _parse_mesh(lines)
    fields = {}
    while pos < len(lines):
        head = lines[pos].split()
        if not head:
            pos += 1
            continue
        if head[0] != "field" or len(head) != 2:
            raise MeshError(f"line {pos + 1}: expected 'field <name>'")
        vals = [float(x) for x in lines[pos + 1: pos + 1 + mesh.n_nodes]]
        if len(vals) != mesh.n_nodes:
            raise MeshError(f"field {head[1]!r} truncated")
        fields[head[1]] = np.array(vals)
        pos += 1 + mesh.n_nodes
    return mesh, fields


def write_csv(path, header, rows):
    """CSV with floats in 17-significant-digit form, LF line endings."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path):
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        return header, [row for row in r]
